"""Desk-scale masked-image-modeling lab.

Submodules import lazily so the CLI can pin BLAS thread counts before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "seeding",
    "masking",
    "layers",
    "encoder",
    "decoders",
    "model",
    "objective",
    "data",
    "analysis",
    "train",
    "figures",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
