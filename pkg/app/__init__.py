"""
Active infrared thermography toolkit: simulation, reduction, adapter, detection
"""
__version__ = "1.0.0"
