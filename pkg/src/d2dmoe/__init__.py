"""d2dmoe: convert small dense transformers into sparse mixture-of-experts
models and measure the accuracy/FLOPs trade-off on desk-scale tasks.

Submodules load lazily (PEP 562) so the CLI can pin BLAS thread counts via
environment variables before numpy comes in.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "ComputationTape": "autodiff",
    "Tensor": "autodiff",
    "backward": "autodiff",
    "forward_op": "autodiff",
    "DenseModel": "models",
    "TransformerConfig": "models",
    "build_model": "models",
    "forward": "models",
    "D2DMoeError": "errors",
    "ValidationError": "errors",
    "DimensionError": "errors",
    "InputError": "errors",
    "ContractError": "errors",
    "NumericError": "errors",
    "FormatError": "errors",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    try:
        module_name = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    import importlib

    module = importlib.import_module(f".{module_name}", __name__)
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
