#!/usr/bin/env python3
"""
Test package for the RFB-SR Toolkit
Contains unit tests for all components of the super-resolution toolkit
"""

import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

__all__ = [
    'test_tensor',
    'test_blocks',
    'test_networks',
    'test_losses',
    'test_optimizer',
    'test_trainer',
    'test_checkpoint',
    'test_ensemble',
    'test_bicubic',
    'test_imaging',
    'test_dataset',
    'test_metrics',
    'test_gradcheck',
    'test_config',
    'test_cli',
    'test_diagnostics'
]
