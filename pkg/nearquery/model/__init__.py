"""
Network modules: deformable attention, backbone, decoders and auxiliary heads
"""
from nearquery.model.segmodel import DecoderOutputs, SegModel, build_model, model_forward, semantic_inference

__all__ = ["DecoderOutputs", "SegModel", "build_model", "model_forward", "semantic_inference"]
