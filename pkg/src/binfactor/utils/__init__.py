"""
Utility modules for binfactor.

Errors, file formats, configuration-file helpers, timestamps and timing.
"""
