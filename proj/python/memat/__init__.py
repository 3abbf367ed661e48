"""Memory-editing laboratory for toy transformers.

Everything lives in the compiled extension; this package just re-exports it.
"""

try:
    from ._memat import *  # noqa: F401,F403  (installed wheel layout)
    from . import _memat as _impl  # noqa: F401
except ImportError:  # extension on sys.path directly, e.g. a CMake build tree
    from _memat import *  # noqa: F401,F403
    import _memat as _impl  # noqa: F401

__version__ = "0.1.0"
__all__ = [name for name in dir(_impl) if not name.startswith("_")]
