import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft, special

from specreg.config import Config
from specreg.errors import (
    ConfigError, DegenerateImageError, DimensionMismatchError, EmptyRegionError, OptimizationError,
)
from specreg.models import BinaryMask, Image2D, JointHistogram, Measure, ResidualSpectrum, WarpResult
from specreg.models.image import as_mask
from specreg.services.image_service import ImageService
from specreg.services.transform_service import TransformService

logger = logging.getLogger(__name__)

# Central-difference step (pixels) the gradient is defined against
GRADIENT_STEP = 0.1
MIN_WINDOW_PIXELS = 32

_OFFSETS = tuple(itertools.product(range(4), range(4)))


def _as_warp(Jw):
    if isinstance(Jw, Image2D):
        return WarpResult(Jw, BinaryMask.full(Jw.width, Jw.height))
    return Jw


def _evaluation_pixels(I, Jw, region):
    """Reference and warped values over region ∩ valid, plus the boolean mask"""
    Jw = _as_warp(Jw)
    if I.shape != Jw.image.shape:
        raise DimensionMismatchError(
            f'reference is {I.width}x{I.height}, warped image is {Jw.width}x{Jw.height}')
    mask = as_mask(region, I.shape) & Jw.valid.bits
    if not mask.any():
        raise EmptyRegionError('evaluation region (region ∩ valid) is empty')
    return I.data[mask], Jw.image.data[mask], mask


def _bin(values, bins):
    return np.clip(np.floor(values * bins), 0, bins - 1).astype(np.int64)


def _xlogx(n):
    return special.xlogy(n, n)


def _joint_counts(i, j, bins):
    cells = _bin(i, bins) * bins + _bin(j, bins)
    return np.bincount(cells, minlength=bins * bins).astype(np.float64).reshape(bins, bins)


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _mi(hist):
    total = hist.total
    p = hist.counts / total
    outer = np.outer(hist.reference_marginal() / total, hist.moving_marginal() / total)
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / outer[nz]))))


def _nmi(hist):
    joint = _entropy(hist.counts)
    if joint <= 0:
        raise DegenerateImageError('NMI is undefined: joint entropy is zero')
    return (_entropy(hist.reference_marginal()) + _entropy(hist.moving_marginal())) / joint


def _rc_energy(residual, alpha):
    c = fft.dctn(residual, type=2, norm='ortho', workers=Config.THREADS)
    return float(np.sum(np.log1p(c * c / alpha)))


class SimilarityService:

    @staticmethod
    def ssd(I, Jw, region=None):
        """Mean squared intensity difference over region ∩ valid"""
        i, j, _ = _evaluation_pixels(I, Jw, region)
        return float(np.mean((i - j) ** 2))

    @staticmethod
    def cross_correlation(I, Jw, region=None):
        """Pearson coefficient with population standard deviations"""
        i, j, _ = _evaluation_pixels(I, Jw, region)
        if np.ptp(i) == 0 or np.ptp(j) == 0:
            raise DegenerateImageError('cross-correlation needs non-constant images on the region')
        di, dj = i - i.mean(), j - j.mean()
        cc = np.mean(di * dj) / np.sqrt(np.mean(di * di) * np.mean(dj * dj))
        return float(np.clip(cc, -1.0, 1.0))

    @staticmethod
    def correlation_ratio(I, Jw, region=None, bins=64):
        """η of the warped image given the iso-sets (intensity bins) of the reference"""
        i, j, _ = _evaluation_pixels(I, Jw, region)
        if np.ptp(j) == 0:
            raise DegenerateImageError('correlation ratio needs a non-constant warped image')
        iso = _bin(i, bins)
        dj = j - j.mean()
        counts = np.bincount(iso, minlength=bins)
        sums = np.bincount(iso, weights=dj, minlength=bins)
        means = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
        within = np.sum((dj - means[iso]) ** 2)
        total = np.sum(dj * dj)
        return float(np.clip(1.0 - within / total, 0.0, 1.0))

    @staticmethod
    def joint_histogram(I, Jw, region=None, bins=64):
        i, j, _ = _evaluation_pixels(I, Jw, region)
        return JointHistogram(_joint_counts(i, j, bins))

    @staticmethod
    def mutual_information(I, Jw, region=None, bins=64):
        """Plug-in mutual information in nats from the hard-binned joint histogram"""
        return _mi(SimilarityService.joint_histogram(I, Jw, region, bins))

    @staticmethod
    def normalized_mutual_information(I, Jw, region=None, bins=64):
        """(H(I) + H(J)) / H(I, J)"""
        return _nmi(SimilarityService.joint_histogram(I, Jw, region, bins))

    @staticmethod
    def lmi_windows(width, height, window, stride):
        """Top-left corners of the tiling windows; border windows are clipped to the image"""
        if window > min(width, height):
            raise ConfigError(f'lmi_window {window} exceeds the image size {width}x{height}')
        return [(x0, y0)
                for y0 in range(0, height, stride)
                for x0 in range(0, width, stride)]

    @staticmethod
    def localized_mutual_information(I, Jw, region, cfg):
        """Mean of per-window mutual information over windows with enough evaluable pixels"""
        Jw = _as_warp(Jw)
        _, _, mask = _evaluation_pixels(I, Jw, region)
        size = cfg.lmi_window
        values = []
        for x0, y0 in SimilarityService.lmi_windows(I.width, I.height, size, cfg.lmi_stride):
            rows, cols = slice(y0, y0 + size), slice(x0, x0 + size)
            m = mask[rows, cols]
            if np.count_nonzero(m) < MIN_WINDOW_PIXELS:
                continue
            counts = _joint_counts(I.data[rows, cols][m], Jw.image.data[rows, cols][m], cfg.bins)
            values.append(_mi(JointHistogram(counts)))
        if not values:
            raise EmptyRegionError(f'no LMI window holds {MIN_WINDOW_PIXELS} evaluable pixels')
        return float(sum(values) / len(values))

    @staticmethod
    def dct2(residual):
        data = residual.data if isinstance(residual, Image2D) else np.asarray(residual, dtype=np.float64)
        return ResidualSpectrum(fft.dctn(data, type=2, norm='ortho', workers=Config.THREADS))

    @staticmethod
    def idct2(spectrum):
        return Image2D(fft.idctn(spectrum.coefficients, type=2, norm='ortho', workers=Config.THREADS))

    @staticmethod
    def residual_complexity(I, Jw, region=None, rc_alpha=0.05):
        """Σ ln(c²/α + 1) over the DCT of the residual, zeroed outside region ∩ valid"""
        Jw = _as_warp(Jw)
        _, _, mask = _evaluation_pixels(I, Jw, region)
        residual = np.where(mask, I.data - Jw.image.data, 0.0)
        return _rc_energy(residual, rc_alpha)

    @staticmethod
    def evaluate(cfg, I, Jw, region=None):
        """Objective to minimise: SSD and RC as they are, similarities negated"""
        measure = cfg.measure
        if measure is Measure.SSD:
            score = SimilarityService.ssd(I, Jw, region)
        elif measure is Measure.CC:
            score = SimilarityService.cross_correlation(I, Jw, region)
        elif measure is Measure.CR:
            score = SimilarityService.correlation_ratio(I, Jw, region, cfg.bins)
        elif measure is Measure.MI:
            score = SimilarityService.mutual_information(I, Jw, region, cfg.bins)
        elif measure is Measure.NMI:
            score = SimilarityService.normalized_mutual_information(I, Jw, region, cfg.bins)
        elif measure is Measure.LMI:
            score = SimilarityService.localized_mutual_information(I, Jw, region, cfg)
        else:
            score = SimilarityService.residual_complexity(I, Jw, region, cfg.rc_alpha)
        return score if measure.is_cost else -score

    @staticmethod
    def objective(cfg, I, J, pre, grid, region=None):
        """Objective of the moving image J warped through ``pre`` and the grid onto I"""
        field = TransformService.densify(grid, I.width, I.height)
        warped = TransformService.warp_image(J, pre, field)
        return SimilarityService.evaluate(cfg, I, warped, region)

    @staticmethod
    def gradient(cfg, I, J, pre, grid, region=None):
        """Derivative of ``objective`` for every control displacement.

        Each component is the central difference with step GRADIENT_STEP, evaluated
        exactly: a control point only moves the pixels in its 4×4-cell support, so the
        perturbed objective of every control is rebuilt from per-pixel deltas of the
        measure's sufficient statistics. Returned in ``grid.parameters()`` order.
        """
        base = SimilarityService.objective(cfg, I, J, pre, grid, region)
        if not np.isfinite(base):
            raise OptimizationError(f'objective is not finite at the current grid: {base}')
        ctx = _GradientContext(cfg, I, J, pre, grid, region)
        grad = np.zeros((grid.size, 2))
        probes = [(axis, sign) for axis in (0, 1) for sign in (1.0, -1.0)]

        with ThreadPoolExecutor(max_workers=min(len(probes), Config.THREADS)) as executor:
            states = dict(zip(probes, executor.map(lambda p: ctx.probe(*p), probes)))
            values = dict(zip(probes, executor.map(lambda p: ctx.perturbed(states[p]), probes)))
        for axis in (0, 1):
            grad[:, axis] = (values[axis, 1.0] - values[axis, -1.0]) / (2.0 * GRADIENT_STEP)

        bad = ~np.isfinite(grad)
        if bad.any():
            logger.debug('%d gradient components not finite; set to 0', int(bad.sum()))
            grad[bad] = 0.0
        return grad.reshape(-1)


@dataclass
class _Probe:
    """Perturbed samples for the 16 support offsets, shape (16, n) each"""
    values: np.ndarray
    valid: np.ndarray
    control: np.ndarray


class _GradientContext:

    def __init__(self, cfg, I, J, pre, grid, region):
        self.cfg = cfg
        self.bins = cfg.bins
        self.J = J
        self.pre = pre
        self.shape = I.shape
        self.controls = grid.size
        self.nx = grid.nx
        ys, xs = np.nonzero(as_mask(region, I.shape))
        self.px, self.py = xs, ys
        self.flat = ys * I.width + xs
        self.i = I.data[ys, xs]
        self.ix, self.iy, self.bx, self.by = TransformService.support_weights(grid, xs, ys)
        disp = TransformService.ffd_displacements(grid, xs.astype(np.float64), ys.astype(np.float64))
        self.qx = xs + disp[:, 0]
        self.qy = ys + disp[:, 1]
        self.j, self.valid = self._sample(self.qx, self.qy)
        self.i_bin = _bin(self.i, self.bins)

    def _sample(self, qx, qy):
        ok = True
        if self.pre is not None:
            qx, qy, ok = TransformService.transform_points(self.pre, qx, qy)
        values, valid = ImageService.sample_points(self.J.data, qx, qy)
        return values, valid & ok

    def probe(self, axis, sign):
        n = self.i.size
        values = np.empty((16, n))
        valid = np.empty((16, n), dtype=bool)
        control = np.empty((16, n), dtype=np.int64)
        for o, (m, l) in enumerate(_OFFSETS):
            shift = sign * GRADIENT_STEP * self.by[:, m] * self.bx[:, l]
            qx = self.qx + shift if axis == 0 else self.qx
            qy = self.qy + shift if axis == 1 else self.qy
            values[o], valid[o] = self._sample(qx, qy)
            control[o] = (self.iy + m) * self.nx + self.ix + l
        return _Probe(values, valid, control)

    def _accumulate(self, probe, deltas, keys=None, length=None):
        keys = probe.control if keys is None else keys
        length = self.controls if length is None else length
        return np.bincount(keys.ravel(), weights=deltas.ravel(), minlength=length)

    def perturbed(self, probe):
        """Objective after perturbing each control in turn, one value per control"""
        measure = self.cfg.measure
        with np.errstate(divide='ignore', invalid='ignore'):
            if measure is Measure.SSD:
                return self._ssd(probe)
            if measure is Measure.CC:
                return -self._cc(probe)
            if measure is Measure.CR:
                return -self._cr(probe)
            if measure in (Measure.MI, Measure.NMI):
                n, sa, sb, sj = self._histogram(probe)
                if measure is Measure.MI:
                    return -(np.log(n) - (sa + sb - sj) / n)
                return -(2.0 * np.log(n) - (sa + sb) / n) / (np.log(n) - sj / n)
            if measure is Measure.LMI:
                return -self._lmi(probe)
            return self._rc(probe)

    def _ssd(self, probe):
        base = np.where(self.valid, (self.i - self.j) ** 2, 0.0)
        err = np.where(probe.valid, (self.i - probe.values) ** 2, 0.0) - base
        count = probe.valid.astype(np.float64) - self.valid
        return (base.sum() + self._accumulate(probe, err)) / (self.valid.sum() + self._accumulate(probe, count))

    def _cc(self, probe):
        ci = self.i[self.valid].mean()
        cj = self.j[self.valid].mean()
        di = self.i - ci

        def stats(j, valid):
            dj = np.where(valid, j - cj, 0.0)
            v = valid.astype(np.float64)
            return [v, v * di, v * di * di, dj, dj * dj, dj * di]

        base = stats(self.j, self.valid)
        sums = []
        for b, p in zip(base, stats(probe.values, probe.valid)):
            sums.append(b.sum() + self._accumulate(probe, p - b))
        n, si, sii, sj, sjj, sij = sums
        cov = sij / n - si * sj / (n * n)
        var_i = sii / n - (si / n) ** 2
        var_j = sjj / n - (sj / n) ** 2
        return cov / np.sqrt(var_i * var_j)

    def _cr(self, probe):
        bins, P = self.bins, self.controls
        cj = self.j[self.valid].mean()
        keys = probe.control * bins + self.i_bin

        def stats(j, valid):
            dj = np.where(valid, j - cj, 0.0)
            return [valid.astype(np.float64), dj, dj * dj]

        tables = []
        for b, p in zip(stats(self.j, self.valid), stats(probe.values, probe.valid)):
            base = np.bincount(self.i_bin, weights=b, minlength=bins)
            delta = self._accumulate(probe, p - b, keys, P * bins).reshape(P, bins)
            tables.append(base[None, :] + delta)
        n, s, ss = tables
        within = np.sum(np.where(n > 0, ss - s * s / np.where(n > 0, n, 1.0), 0.0), axis=1)
        total_n, total_s, total_ss = n.sum(axis=1), s.sum(axis=1), ss.sum(axis=1)
        total = total_ss - total_s * total_s / total_n
        return 1.0 - within / total

    def _histogram(self, probe, pixels=None):
        """Per-control (N, Σ a ln a, Σ b ln b, Σ c ln c) of the perturbed joint histogram"""
        bins, P = self.bins, self.controls
        i_bin, j_bin, valid = self.i_bin, _bin(self.j, bins), self.valid
        values, ok, control = probe.values, probe.valid, probe.control
        if pixels is not None:
            i_bin, j_bin, valid = i_bin[pixels], j_bin[pixels], valid[pixels]
            values, ok, control = values[:, pixels], ok[:, pixels], control[:, pixels]

        joint = np.bincount((i_bin * bins + j_bin)[valid], minlength=bins * bins).astype(np.float64)
        ref = joint.reshape(bins, bins).sum(axis=1)
        mov = joint.reshape(bins, bins).sum(axis=0)
        total = float(valid.sum())

        j_new = _bin(values, bins)
        same = valid & ok & (j_new == j_bin)
        removed = valid & ~same
        added = ok & ~same
        i_full = np.broadcast_to(i_bin, control.shape)
        j_full = np.broadcast_to(j_bin, control.shape)
        k_rem, k_add = control[removed], control[added]
        i_rem, i_add = i_full[removed], i_full[added]
        j_rem, j_add = j_full[removed], j_new[added]

        # sparse (control, cell) deltas of the joint histogram
        keys = np.concatenate([k_rem * bins * bins + i_rem * bins + j_rem,
                               k_add * bins * bins + i_add * bins + j_add])
        signs = np.concatenate([-np.ones(k_rem.size), np.ones(k_add.size)])
        cells, inverse = np.unique(keys, return_inverse=True)
        delta = np.bincount(inverse.ravel(), weights=signs, minlength=cells.size)
        before = joint[cells % (bins * bins)]
        change = _xlogx(before + delta) - _xlogx(before)
        s_joint = _xlogx(joint).sum() + np.bincount(cells // (bins * bins), weights=change, minlength=P)

        def marginal(base, rem, add):
            d = (np.bincount(k_add * bins + add, minlength=P * bins)
                 - np.bincount(k_rem * bins + rem, minlength=P * bins))
            return _xlogx(base[None, :] + d.reshape(P, bins)).sum(axis=1)

        s_ref = marginal(ref, i_rem, i_add)
        s_mov = marginal(mov, j_rem, j_add)
        n = total + np.bincount(k_add, minlength=P) - np.bincount(k_rem, minlength=P)
        return n, s_ref, s_mov, s_joint

    def _lmi(self, probe):
        size, stride = self.cfg.lmi_window, self.cfg.lmi_stride
        height, width = self.shape
        total = np.zeros(self.controls)
        kept = 0
        for x0, y0 in SimilarityService.lmi_windows(width, height, size, stride):
            pixels = ((self.px >= x0) & (self.px < x0 + size)
                      & (self.py >= y0) & (self.py < y0 + size))
            if np.count_nonzero(self.valid & pixels) < MIN_WINDOW_PIXELS:
                continue
            n, sa, sb, sj = self._histogram(probe, pixels)
            total += np.log(n) - (sa + sb - sj) / n
            kept += 1
        return total / kept

    def _residual(self):
        residual = np.zeros(self.shape)
        residual.reshape(-1)[self.flat] = np.where(self.valid, self.i - self.j, 0.0)
        return residual

    def _rc(self, probe):
        """Perturbed RC energies rebuilt from the base spectrum.

        The orthonormal DCT is linear: a control's residual change Δr, confined to the
        bounding box of its support, moves the spectrum by C_y[:, rows] · Δr · C_x[:, cols]ᵀ.
        """
        alpha, P = self.cfg.rc_alpha, self.controls
        height, width = self.shape
        c = fft.dctn(self._residual(), type=2, norm='ortho', workers=Config.THREADS)
        energy = float(np.sum(np.log1p(c * c / alpha)))
        twice_c, denom = 2.0 * c, alpha + c * c
        Cy = fft.dct(np.eye(height), type=2, norm='ortho', axis=0)
        Cx = fft.dct(np.eye(width), type=2, norm='ortho', axis=0)

        base = np.where(self.valid, self.i - self.j, 0.0)
        delta = (np.where(probe.valid, self.i - probe.values, 0.0) - base[None, :]).ravel()
        control = probe.control.ravel()
        pixel = np.tile(np.arange(self.i.size), 16)
        order = np.argsort(control, kind='stable')
        bounds = np.searchsorted(control[order], np.arange(P + 1))

        out = np.full(P, energy)
        for k in range(P):
            sel = order[bounds[k]:bounds[k + 1]]
            if not np.any(delta[sel]):
                continue
            rows, cols = self.py[pixel[sel]], self.px[pixel[sel]]
            r0, c0 = rows.min(), cols.min()
            block = np.zeros((rows.max() - r0 + 1, cols.max() - c0 + 1))
            block[rows - r0, cols - c0] = delta[sel]
            dc = Cy[:, r0:r0 + block.shape[0]] @ (block @ Cx[:, c0:c0 + block.shape[1]].T)
            # ln((α + (c+Δc)²) / (α + c²)) summed over the spectrum
            out[k] += float(np.sum(np.log1p(dc * (twice_c + dc) / denom)))
        return out
