"""Regional image editing with selective Canny control on a desk-scale rectified-flow MM-DiT."""
from .canny import EdgeMap, canny_edges
from .edit import EditConfig, EditReport, EditRequest, Editor, edit
from .imageio import Image, load_png, save_png
from .mmdit import Model, ModelConfig, load_checkpoint, save_checkpoint

__all__ = [
    "EdgeMap", "EditConfig", "EditReport", "EditRequest", "Editor", "Image", "Model", "ModelConfig",
    "canny_edges", "edit", "load_checkpoint", "load_png", "save_checkpoint", "save_png",
]
__version__ = "0.1.0"
