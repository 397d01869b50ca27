"""Semi-gridless variational Bayes channel estimation for near-field arrays."""

__version__ = "0.1.0"

from .channel import (  # noqa: E402
    ArrayGeometry,
    ArrayKind,
    ChannelMode,
    InvalidConfig,
    PathParams,
    Scatterer,
    Scene,
    SceneConfig,
    add_noise,
    generate_scene,
    synthesize_channel,
)
from .sgvb import SgvbConfig, SgvbResult, run as sgvb_estimate  # noqa: E402

__all__ = [
    "ArrayGeometry",
    "ArrayKind",
    "ChannelMode",
    "InvalidConfig",
    "PathParams",
    "Scatterer",
    "Scene",
    "SceneConfig",
    "SgvbConfig",
    "SgvbResult",
    "add_noise",
    "generate_scene",
    "sgvb_estimate",
    "synthesize_channel",
]
