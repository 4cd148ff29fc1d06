"""
Custom exception classes for the scene data engine.
Provides specific error handling for each pipeline stage.
"""

from typing import Any, Dict, Optional


class SceneEngineError(Exception):
    """Base exception class for the scene data engine."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.path = str(path) if path is not None else None

    def __reduce__(self):
        # keep the path when errors cross worker processes
        return type(self), (self.message, self.path)

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable error record for the command line."""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "path": self.path,
        }


class GeometryError(SceneEngineError):
    """Raised when a camera or pose computation is undefined."""
    pass


class DataFormatError(SceneEngineError):
    """Raised when an input file is missing or cannot be parsed."""
    pass


class CurationError(SceneEngineError):
    """Raised when frame selection or clip splitting fails."""
    pass


class ReconstructionError(SceneEngineError):
    """Raised when depth fusion or mesh filtering fails."""
    pass


class InstanceLiftError(SceneEngineError):
    """Raised when 2D masks cannot be lifted to 3D."""
    pass


class SceneGraphError(SceneEngineError):
    """Raised when scene graph construction fails."""
    pass


class QuestionGenerationError(SceneEngineError):
    """Raised when a question cannot be generated or recomputed."""
    pass


class NavigationError(SceneEngineError):
    """Raised when trajectory processing or action encoding fails."""
    pass


class MetricError(SceneEngineError):
    """Raised when an evaluation metric cannot be computed."""
    pass


class SynthError(SceneEngineError):
    """Raised when a synthetic scene cannot be generated."""
    pass


class ConfigurationError(SceneEngineError):
    """Raised when configuration is invalid."""
    pass
