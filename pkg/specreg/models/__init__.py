from .image import Image2D, BinaryMask, SpectralStack
from .geometry import HomogeneousTransform2D, ControlGrid, DeformationField, WarpResult
from .registration import (
    Measure, SimilarityConfig, JointHistogram, ResidualSpectrum, OptimizerConfig,
    TraceEntry, TraceLevel, OptimizerTrace, RegistrationConfig, RegistrationResult,
    RegionSpec, RegionRow, EvaluationReport, DistortionSettings, SyntheticCase,
)

__all__ = [
    'Image2D', 'BinaryMask', 'SpectralStack',
    'HomogeneousTransform2D', 'ControlGrid', 'DeformationField', 'WarpResult',
    'Measure', 'SimilarityConfig', 'JointHistogram', 'ResidualSpectrum', 'OptimizerConfig',
    'TraceEntry', 'TraceLevel', 'OptimizerTrace', 'RegistrationConfig', 'RegistrationResult',
    'RegionSpec', 'RegionRow', 'EvaluationReport', 'DistortionSettings', 'SyntheticCase',
]
