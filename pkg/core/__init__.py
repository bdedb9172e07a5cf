"""
Core super-resolution functionality: tensors with autodiff, RFB-ESRGAN
networks, training, checkpoint ensembling, data and metrics
"""

from .version import __version__, get_version_string

__all__ = ['__version__', 'get_version_string']
