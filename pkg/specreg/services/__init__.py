from .image_service import ImageService
from .transform_service import TransformService
from .similarity_service import SimilarityService
from .optimizer_service import OptimizerService
from .registration_service import RegistrationService
from .evaluation_service import EvaluationService

__all__ = [
    'ImageService', 'TransformService', 'SimilarityService', 'OptimizerService',
    'RegistrationService', 'EvaluationService',
]
