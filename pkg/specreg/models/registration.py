from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np

from specreg.errors import ConfigError, SpecregError
from specreg.models.geometry import ControlGrid, DeformationField, HomogeneousTransform2D
from specreg.models.image import Image2D


class Measure(str, Enum):
    SSD = 'ssd'
    CC = 'cc'
    CR = 'cr'
    MI = 'mi'
    NMI = 'nmi'
    LMI = 'lmi'
    RC = 'rc'

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            choices = '|'.join(m.value for m in cls)
            raise ConfigError(f'unknown measure {name!r}, expected one of {choices}') from None

    @property
    def is_cost(self):
        """SSD and RC are costs already; the others are similarities."""
        return self in (Measure.SSD, Measure.RC)


@dataclass(frozen=True)
class SimilarityConfig:
    measure: Measure = Measure.SSD
    bins: int = 64
    rc_alpha: float = 0.05
    lmi_window: int = 64
    lmi_stride: int = 64

    def __post_init__(self):
        object.__setattr__(self, 'measure', Measure.parse(self.measure))
        if self.bins < 2:
            raise ConfigError('bins must be at least 2')
        if not self.rc_alpha > 0:
            raise ConfigError('rc_alpha must be positive')
        if self.lmi_window < 8:
            raise ConfigError('lmi_window must be at least 8 pixels')
        if self.lmi_stride < 1:
            raise ConfigError('lmi_stride must be at least 1 pixel')

    def for_level(self, level, width, height):
        """LMI windows shrink with the pyramid so every level keeps its tiling."""
        if self.measure is not Measure.LMI or level == 0:
            return self
        factor = 2 ** level
        window = max(8, min(int(round(self.lmi_window / factor)), width, height))
        stride = max(1, int(round(self.lmi_stride / factor)))
        return replace(self, lmi_window=window, lmi_stride=stride)

    def to_dict(self):
        return {
            'measure': self.measure.value,
            'bins': self.bins,
            'rc_alpha': self.rc_alpha,
            'lmi_window': self.lmi_window,
            'lmi_stride': self.lmi_stride,
        }


@dataclass(frozen=True)
class JointHistogram:
    """Joint counts indexed ``counts[reference_bin, moving_bin]``."""

    counts: np.ndarray

    @property
    def bins(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return float(self.counts.sum())

    def reference_marginal(self):
        return self.counts.sum(axis=1)

    def moving_marginal(self):
        return self.counts.sum(axis=0)


@dataclass(frozen=True)
class ResidualSpectrum:
    coefficients: np.ndarray

    def energy(self):
        return float(np.sum(self.coefficients ** 2))


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 200
    initial_step: float = 1.0
    backtrack_factor: float = 0.5
    min_step: float = 1e-6
    rel_tol: float = 1e-6
    pyramid_levels: int = 4
    armijo: float = 1e-4

    def __post_init__(self):
        if self.max_iters < 0:
            raise ConfigError('max_iters cannot be negative')
        if not self.initial_step > 0 or not self.min_step > 0:
            raise ConfigError('initial_step and min_step must be positive')
        if not 0 < self.backtrack_factor < 1:
            raise ConfigError('backtrack_factor must lie in (0, 1)')
        if self.rel_tol < 0:
            raise ConfigError('rel_tol cannot be negative')
        if self.pyramid_levels < 1:
            raise ConfigError('pyramid_levels must be at least 1')
        if not 0 <= self.armijo < 1:
            raise ConfigError('armijo must lie in [0, 1)')

    def to_dict(self):
        return {
            'max_iters': self.max_iters,
            'initial_step': self.initial_step,
            'backtrack_factor': self.backtrack_factor,
            'min_step': self.min_step,
            'rel_tol': self.rel_tol,
            'pyramid_levels': self.pyramid_levels,
            'armijo': self.armijo,
        }


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    objective: float
    step: float
    grad_norm: float


@dataclass
class TraceLevel:
    level: int
    entries: List[TraceEntry] = field(default_factory=list)
    aborted: bool = False

    @property
    def iterations(self):
        # the first entry records the starting point
        return max(0, len(self.entries) - 1)


@dataclass
class OptimizerTrace:
    levels: List[TraceLevel] = field(default_factory=list)

    def start_level(self, level):
        self.levels.append(TraceLevel(level))
        return self.levels[-1]

    @property
    def aborted(self):
        return any(level.aborted for level in self.levels)

    def total_iterations(self):
        return sum(level.iterations for level in self.levels)

    def rows(self):
        """(iteration, level, objective, step, grad_norm) tuples in run order."""
        return [(e.iteration, lvl.level, e.objective, e.step, e.grad_norm)
                for lvl in self.levels for e in lvl.entries]

    def to_dict(self):
        return {
            'levels': [{'level': lvl.level, 'iterations': lvl.iterations, 'aborted': lvl.aborted,
                        'final_objective': lvl.entries[-1].objective if lvl.entries else None}
                       for lvl in self.levels],
            'total_iterations': self.total_iterations(),
        }


_CONFIG_KEYS = {
    'measure': ('similarity', Measure.parse),
    'bins': ('similarity', int),
    'rc_alpha': ('similarity', float),
    'lmi_window': ('similarity', int),
    'lmi_stride': ('similarity', int),
    'max_iters': ('optimizer', int),
    'initial_step': ('optimizer', float),
    'backtrack_factor': ('optimizer', float),
    'min_step': ('optimizer', float),
    'rel_tol': ('optimizer', float),
    'armijo': ('optimizer', float),
    'pyramid_levels': ('optimizer', int),
}


def _parse_flag(value):
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f'not a boolean: {value!r}')


def _parse_channel(value):
    text = str(value).strip().lower()
    if text == 'mean':
        return 'mean'
    index = int(text)
    if index < 0:
        raise ValueError('channel index cannot be negative')
    return index


@dataclass(frozen=True)
class RegistrationConfig:
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prereg_enabled: bool = True
    moving_channel: Union[int, str] = 'mean'
    coarse_spacing: float = 64.0

    def __post_init__(self):
        if not self.coarse_spacing > 0:
            raise ConfigError('coarse_spacing must be positive')
        if self.moving_channel != 'mean' and not isinstance(self.moving_channel, int):
            raise ConfigError(f'moving_channel must be an index or "mean", got {self.moving_channel!r}')

    def with_overrides(self, values):
        """Return a copy with flat ``key -> value`` overrides applied (strings are parsed)."""
        similarity, optimizer = {}, {}
        top = {}
        for key, raw in values.items():
            if raw is None:
                continue
            key = key.strip().lower()
            try:
                if key in _CONFIG_KEYS:
                    section, parse = _CONFIG_KEYS[key]
                    (similarity if section == 'similarity' else optimizer)[key] = parse(raw)
                elif key == 'prereg_enabled':
                    top[key] = raw if isinstance(raw, bool) else _parse_flag(raw)
                elif key == 'moving_channel':
                    top[key] = _parse_channel(raw)
                elif key == 'coarse_spacing':
                    top[key] = float(raw)
                else:
                    raise ConfigError(f'unknown configuration key {key!r}')
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f'bad value for {key!r}: {e}') from None
        return replace(
            self,
            similarity=replace(self.similarity, **similarity),
            optimizer=replace(self.optimizer, **optimizer),
            **top,
        )

    def to_dict(self):
        return {
            'similarity': self.similarity.to_dict(),
            'optimizer': self.optimizer.to_dict(),
            'prereg_enabled': self.prereg_enabled,
            'moving_channel': self.moving_channel,
            'coarse_spacing': self.coarse_spacing,
        }


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of the two-stage registration.

    ``prereg`` maps moving-frame points to the reference frame; ``sampling`` is its
    inverse and is what warping applies to ``p + dense[p]``.
    """

    prereg: HomogeneousTransform2D
    sampling: HomogeneousTransform2D
    grid: ControlGrid
    dense: DeformationField
    trace: OptimizerTrace
    score_before: float
    score_after: float
    measure: Measure
    moving_size: Optional[Tuple[int, int]] = None
    pyramid_levels: int = 1
    pyramid_clamped: bool = False

    def to_dict(self):
        magnitude = self.dense.magnitude()
        return {
            'measure': self.measure.value,
            'moving_size': list(self.moving_size) if self.moving_size else None,
            'pyramid': {'levels': self.pyramid_levels, 'clamped': self.pyramid_clamped},
            'prereg': self.prereg.to_dict(),
            'grid': self.grid.to_dict(),
            'dense': {
                'width': self.dense.width,
                'height': self.dense.height,
                'mean_disp_px': float(magnitude.mean()),
                'max_disp_px': float(magnitude.max()),
            },
            'scores': {'before': self.score_before, 'after': self.score_after},
            'trace': self.trace.to_dict(),
        }


@dataclass(frozen=True)
class RegionSpec:
    name: str
    rect: Tuple[int, int, int, int]

    def __post_init__(self):
        x, y, w, h = (int(v) for v in self.rect)
        if w < 1 or h < 1:
            raise SpecregError(f'region {self.name!r} needs a positive size')
        object.__setattr__(self, 'rect', (x, y, w, h))

    def fits(self, width, height):
        x, y, w, h = self.rect
        return x >= 0 and y >= 0 and x + w <= width and y + h <= height

    def slices(self):
        x, y, w, h = self.rect
        return slice(y, y + h), slice(x, x + w)


@dataclass(frozen=True)
class RegionRow:
    name: str
    dsc_before: float
    dsc_after: float
    relative_overlap_after: float

    def to_dict(self):
        return {
            'region': self.name,
            'dsc_before': self.dsc_before,
            'dsc_after': self.dsc_after,
            'relative_overlap': self.relative_overlap_after,
        }


@dataclass(frozen=True)
class EvaluationReport:
    rows: Tuple[RegionRow, ...] = ()
    field_mean_err_px: Optional[float] = None
    field_max_err_px: Optional[float] = None
    measure: Optional[str] = None

    def to_dict(self):
        data = {'regions': [row.to_dict() for row in self.rows]}
        if self.measure is not None:
            data['measure'] = self.measure
        if self.field_mean_err_px is not None:
            data['field_mean_err_px'] = self.field_mean_err_px
            data['field_max_err_px'] = self.field_max_err_px
        return data


@dataclass(frozen=True)
class DistortionSettings:
    """Synthetic distortion applied by the validation workflow."""

    max_disp: float = 8.0
    spacing: float = 64.0
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0
    rotation_deg: float = 0.0
    shift: Tuple[float, float] = (0.0, 0.0)
    interior_fraction: float = 0.8

    def __post_init__(self):
        if not 0 <= self.bias_amplitude < 1:
            raise ConfigError('bias_amplitude must lie in [0, 1)')
        if self.noise_sigma < 0:
            raise ConfigError('noise_sigma cannot be negative')
        if not 0 < self.interior_fraction <= 1:
            raise ConfigError('interior_fraction must lie in (0, 1]')


@dataclass(frozen=True)
class SyntheticCase:
    """Generated validation pair with its known answer.

    ``truth`` is the total displacement a perfect registration of ``moving`` onto
    ``reference`` would report (rigid misalignment included).
    """

    reference: Image2D
    moving: Image2D
    truth: DeformationField
    grid: ControlGrid
    rigid: HomogeneousTransform2D
    seed: int
