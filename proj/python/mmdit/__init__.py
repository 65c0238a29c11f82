"""Desk-scale joint audio-video diffusion transformer core.

Thin wrapper over the C++ extension; everything operates on numpy arrays of
float64. See the package README for the CLI (train / sample / verify / bench).
"""

try:
    from ._core import *  # noqa: F401,F403
    from ._core import Model, MmditError  # noqa: F401
except ImportError:  # build-tree layout: extension next to the package dir
    from _core import *  # noqa: F401,F403
    from _core import Model, MmditError  # noqa: F401

__all__ = [
    "Model",
    "MmditError",
    "audio_scale_factor",
    "condition_offset_indices",
    "apply_rope",
    "build_task_mask",
    "build_loss_mask",
    "assemble_channel_input",
    "flow_interpolate",
    "vsa_attention",
    "upsample_latent",
    "splice_keyframes",
    "splice_inpaint",
    "embed_prompt",
    "default_keyframe_positions",
]
