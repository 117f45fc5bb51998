"""
metarate: trace-driven laboratory for meta-RL bitrate adaptation in interactive video.
"""
__version__ = "1.0.0"
