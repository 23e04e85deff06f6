from .heads import anchor_grid, decode, nms, postprocess
from .network import DEFAULT_BLOCKS, TASKS, BlockSpec, BuildError, LayerSpec, StreamModel, expand_blocks
from .oracle import OracleReport, oracle_check
from .session import (StepResult, StreamSession, detect, receptive_radius, segment, stateless_boxes,
                      stateless_predict, step)


def build_backbone(specs, space, input_dims=(64, 64, 3), **kwargs) -> StreamModel:
    return StreamModel(input_dims, specs, space, **kwargs)


__all__ = [
    "BlockSpec", "BuildError", "DEFAULT_BLOCKS", "LayerSpec", "OracleReport", "StepResult", "StreamModel",
    "StreamSession", "TASKS", "anchor_grid", "build_backbone", "decode", "detect", "expand_blocks", "nms",
    "oracle_check", "postprocess", "receptive_radius", "segment", "stateless_boxes", "stateless_predict", "step",
]
