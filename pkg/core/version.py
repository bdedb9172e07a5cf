#!/usr/bin/env python3
"""
Package version
"""

__version__ = "1.0.0"
__app_name__ = "RFB-SR Toolkit"


def get_version_string():
    return f"{__app_name__} v{__version__}"
