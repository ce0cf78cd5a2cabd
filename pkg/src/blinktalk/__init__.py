"""Talking-face synthesis on a procedural avatar testbed.

Audio drives lip content and eye blinking, a reference video drives head
pose, and a style-based generator renders the result at 64x64.
"""

__version__ = "0.1.0"
