class CdnetError(Exception):
    """Base exception for cdnet errors"""
    pass


class ConfigError(CdnetError):
    """Run configuration is missing, malformed or fails validation"""
    pass


class SceneError(CdnetError):
    """Scene directory or in-memory scene violates the raster store contract"""
    pass


class SynthError(CdnetError):
    """Synthetic scene generation failed"""
    pass


class SamplerError(CdnetError):
    """Patch extraction, augmentation or weighting failed"""
    pass


class NetError(CdnetError):
    """Network configuration or tensor shapes are invalid"""
    pass


class TrainingError(CdnetError):
    """Optimization diverged or training inputs are inconsistent"""
    pass


class InferenceError(CdnetError):
    """Tiled prediction or evaluation inputs are inconsistent"""
    pass
