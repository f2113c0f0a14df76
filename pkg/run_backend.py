import os

import uvicorn
from dotenv import load_dotenv

load_dotenv()

if __name__ == "__main__":
    # Run the FastAPI backend
    uvicorn.run(
        "mdfm.main:app",
        host=os.getenv("MDFM_HOST", "0.0.0.0"),
        port=int(os.getenv("MDFM_PORT", "8000")),
        reload=True,
        log_level=os.getenv("MDFM_LOG_LEVEL", "info").lower(),
    )
