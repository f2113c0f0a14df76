import io
import json
import logging
from typing import Dict, List, Optional

import pandas as pd
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from pydantic import ValidationError

from .models.errors import MdfmError
from .models.schemas import (
    DecompositionResponse,
    EstimateResponse,
    FittedModelRecord,
    HealthResponse,
    ModelConfig,
    NowcastResponse,
    SimulateRequest,
    SimulateResponse,
)
from .services.decomposition import Decomposer
from .services.ecm_estimator import EcmEstimator, FittedModel
from .services.nowcaster import Nowcaster, read_calendar
from .services.panel_builder import PanelBuilder
from .services.simulator import Simulator, default_parameters
from .services.state_space import StateSpaceBuilder
from .utils.file_utils import frame_to_csv, read_calendar_csv, read_macro_csv, read_micro_csv, validate_file_type

logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(title="MDFM Nowcasting API", version="0.1.0")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Initialize services
panel_builder = PanelBuilder()
state_space_builder = StateSpaceBuilder()
estimator = EcmEstimator(builder=state_space_builder)
decomposer = Decomposer(smoother=estimator.smoother)
nowcaster = Nowcaster(smoother=estimator.smoother, panel_builder=panel_builder)
simulator = Simulator(panel_builder=panel_builder)
# fitted models held in memory, keyed by the hash of their parameter vector
fitted_models: Dict[str, FittedModel] = {}


def _client_error(e: MdfmError) -> HTTPException:
    logger.warning("Request failed in %s: %s", e.where, e.message)
    return HTTPException(status_code=400, detail=f"error [{e.where}]: {e.message}")


async def _read_csv_upload(file: Optional[UploadFile], reader):
    if file is None:
        return None
    if not validate_file_type(file.filename):
        raise HTTPException(status_code=400, detail=f"Unsupported file type for '{file.filename}'. Please upload CSV files.")
    try:
        return reader(io.BytesIO(await file.read()))
    except MdfmError as e:
        raise _client_error(e)
    except (ValueError, pd.errors.ParserError) as e:
        raise HTTPException(status_code=400, detail=f"Could not parse '{file.filename}': {str(e)}")


async def _read_json_upload(file: UploadFile, model):
    try:
        return model.model_validate(json.loads(await file.read()))
    except (ValidationError, json.JSONDecodeError) as e:
        raise HTTPException(status_code=400, detail=f"Invalid {model.__name__} in '{file.filename}': {str(e)}")


async def _fitted_from(model: Optional[UploadFile], model_id: Optional[str]) -> FittedModel:
    if model is not None:
        return FittedModel.from_record(await _read_json_upload(model, FittedModelRecord))
    if model_id and model_id in fitted_models:
        return fitted_models[model_id]
    raise HTTPException(status_code=404, detail=f"Model '{model_id}' not found. Please upload a fitted model.")


def _records(frame: pd.DataFrame) -> List[dict]:
    # to_json writes NaN as null and converts numpy scalars
    return json.loads(frame.to_json(orient="records", double_precision=15))


@app.post("/simulate", response_model=SimulateResponse)
async def simulate(request: SimulateRequest):
    """Draw a synthetic panel from a configuration with default true parameters"""
    try:
        config = request.config
        sizes = request.design.resolved_group_sizes(config.G)
        ss = state_space_builder.build_state_space(config, default_parameters(config), sizes)
        result = simulator.simulate(ss, request.design)
        truth = FittedModel(config=result.config, parameters=result.parameters, layout=result.panel.layout(),
                            sample_end=result.panel.T)
        return SimulateResponse(
            macro_csv=frame_to_csv(result.macro),
            micro_csv=frame_to_csv(result.micro),
            truth=truth.to_record(),
        )
    except MdfmError as e:
        raise _client_error(e)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"Invalid simulation design: {str(e)}")
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error simulating panel: {str(e)}")


@app.post("/estimate", response_model=EstimateResponse)
async def estimate(
    config: UploadFile = File(...),
    macro: UploadFile = File(...),
    micro: Optional[UploadFile] = File(None),
    max_iterations: Optional[int] = Form(None),
    sample_end: Optional[int] = Form(None),
):
    """Fit a model from uploaded configuration and panels"""
    model_config = await _read_json_upload(config, ModelConfig)
    macro_frame = await _read_csv_upload(macro, read_macro_csv)
    micro_frame = await _read_csv_upload(micro, read_micro_csv) if micro is not None else read_micro_csv(None)
    try:
        panel = panel_builder.build(micro_frame, macro_frame, model_config)
        fitted = estimator.estimate(panel, model_config, sample_end=sample_end, max_iterations=max_iterations)
    except MdfmError as e:
        raise _client_error(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error estimating model: {str(e)}")
    fitted_models[fitted.model_id] = fitted
    return EstimateResponse(
        model_id=fitted.model_id,
        converged=fitted.converged,
        iterations=fitted.iterations,
        objective=fitted.objective,
        trace=fitted.trace,
    )


@app.get("/models/{model_id}", response_model=FittedModelRecord)
async def get_model(model_id: str):
    """Download a fitted model held in memory"""
    if model_id not in fitted_models:
        raise HTTPException(status_code=404, detail=f"Model '{model_id}' not found")
    return fitted_models[model_id].to_record()


@app.get("/models")
async def list_models():
    """List the fitted models held in memory"""
    return {
        "models": [
            {"model_id": key, "converged": fitted.converged, "iterations": fitted.iterations}
            for key, fitted in fitted_models.items()
        ]
    }


@app.post("/decompose", response_model=DecompositionResponse)
async def decompose(
    macro: UploadFile = File(...),
    micro: Optional[UploadFile] = File(None),
    model: Optional[UploadFile] = File(None),
    model_id: Optional[str] = Form(None),
):
    """Trend, common-cycle and idiosyncratic decomposition of an uploaded panel"""
    fitted = await _fitted_from(model, model_id)
    macro_frame = await _read_csv_upload(macro, read_macro_csv)
    micro_frame = await _read_csv_upload(micro, read_micro_csv) if micro is not None else read_micro_csv(None)
    try:
        config = fitted.config.model_copy(update={"group_sizes": None})
        panel = panel_builder.build(micro_frame, macro_frame, config)
        decomposition = decomposer.decompose(fitted, panel)
        summary = decomposer.group_summary(fitted, panel, decomposition.smoothed)
    except MdfmError as e:
        raise _client_error(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error decomposing panel: {str(e)}")
    return DecompositionResponse(rows=_records(decomposition.frame), group_summary=_records(summary))


@app.post("/nowcast", response_model=NowcastResponse)
async def nowcast(
    calendar: UploadFile = File(...),
    model: Optional[UploadFile] = File(None),
    model_id: Optional[str] = Form(None),
    macro: Optional[UploadFile] = File(None),
    micro: Optional[UploadFile] = File(None),
    targets: str = Form(""),
    core_only: bool = Form(False),
):
    """Replay a release calendar; `targets` is a comma-separated list of reference periods"""
    fitted = await _fitted_from(model, model_id)
    calendar_frame = await _read_csv_upload(calendar, read_calendar_csv)
    try:
        target_periods = [int(item) for item in targets.split(",") if item.strip()] or None
    except ValueError:
        raise HTTPException(status_code=400, detail=f"Targets must be integers, got '{targets}'")
    try:
        base = None
        if macro is not None or micro is not None:
            macro_frame = await _read_csv_upload(macro, read_macro_csv) if macro is not None else pd.DataFrame(columns=["time", "series", "value"])
            micro_frame = await _read_csv_upload(micro, read_micro_csv) if micro is not None else read_micro_csv(None)
            base = nowcaster.base_information_set(fitted, macro_frame, micro_frame)
        batches = nowcaster.replay(fitted, read_calendar(calendar_frame), targets=target_periods,
                                   core_only=core_only, base=base)
    except HTTPException:
        raise
    except MdfmError as e:
        raise _client_error(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error replaying calendar: {str(e)}")
    return NowcastResponse(estimates=[estimate for _, batch in batches for estimate in batch], core_only=core_only)


@app.get("/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint"""
    return HealthResponse(status="healthy", models_loaded=len(fitted_models))


@app.get("/")
async def root():
    """Root endpoint"""
    return {"message": "MDFM Nowcasting API", "version": "0.1.0"}
