"""Reference masked-diffusion model server for the dift wire protocol."""

from .model import ReferenceDiffusionModel, load_image, load_model, synthetic_image
from .server import BridgeServer, BridgeSession, serve

__version__ = "0.1.0"

__all__ = [
    "BridgeServer",
    "BridgeSession",
    "ReferenceDiffusionModel",
    "load_image",
    "load_model",
    "serve",
    "synthetic_image",
]
