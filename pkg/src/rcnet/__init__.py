"""Recurrent convolutional video networks, their 3D/(2+1)D baselines and analysis tools."""
from rcnet.arch import ArchSpec, Model, build_model, forward_clip, stream_step, stream_video, unroll_eval
from rcnet.tensor import Tape, Tensor, backward

__all__ = [
    "ArchSpec", "Model", "Tape", "Tensor", "backward", "build_model",
    "forward_clip", "stream_step", "stream_video", "unroll_eval",
]
