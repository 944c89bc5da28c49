import logging
import math
import os

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from specreg.errors import (
    ConfigError, DegenerateImageError, DimensionMismatchError, ImageFormatError, SpecregError,
    UsageError,
)
from specreg.models import BinaryMask, Image2D, SpectralStack
from specreg.models.image import as_mask
from specreg.utils import atomic_write

logger = logging.getLogger(__name__)

PNG_SIGNATURE = b'\x89PNG\r\n\x1a\n'
PYRAMID_SIGMA = 1.0
PYRAMID_MIN_SIDE = 16
OTSU_BINS = 256


def _pgm_tokens(raw, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte ending the header.
    """
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ImageFormatError('truncated PGM header')
        if raw[pos:pos + 1] == b'#':
            end = raw.find(b'\n', pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos


def _decode_pgm(raw):
    tokens, pos = _pgm_tokens(raw, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError('malformed PGM header') from None
    if width < 1 or height < 1:
        raise ImageFormatError(f'PGM dimensions must be positive, got {width}x{height}')
    if not 0 < maxval <= 65535:
        raise ImageFormatError(f'unsupported PGM bit depth (maxval {maxval})')
    if pos >= len(raw):
        raise ImageFormatError('PGM header is not followed by pixel data')
    dtype = np.dtype('u1') if maxval < 256 else np.dtype('>u2')
    expected = width * height * dtype.itemsize
    body = raw[pos + 1:pos + 1 + expected]
    if len(body) != expected:
        raise ImageFormatError(f'PGM pixel data truncated: {len(body)} of {expected} bytes')
    samples = np.frombuffer(body, dtype=dtype).reshape(height, width)
    if samples.max() > maxval:
        raise ImageFormatError('PGM sample exceeds maxval')
    return Image2D(samples.astype(np.float64) / maxval)


def _decode_png(path):
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == 'L':
                return Image2D(np.asarray(img, dtype=np.float64) / 255.0)
            if mode in ('I;16', 'I;16B', 'I;16L', 'I'):
                samples = np.asarray(img).astype(np.float64)
                if samples.min() < 0 or samples.max() > 65535:
                    raise ImageFormatError(f'unsupported PNG sample range in mode {mode}')
                return Image2D(samples / 65535.0)
            if mode == '1':
                raise ImageFormatError('unsupported bit depth: 1-bit PNG')
            raise ImageFormatError(f'unsupported color format: PNG mode {mode}')
    except (UnidentifiedImageError, OSError) as e:
        raise ImageFormatError(f'cannot decode PNG {path}: {e}') from None


class ImageService:

    @staticmethod
    def load_image(path):
        """Load an 8/16-bit grayscale PGM (P5) or PNG scaled to [0, 1]"""
        try:
            with open(path, 'rb') as handle:
                raw = handle.read()
        except OSError as e:
            raise ImageFormatError(f'cannot read {path}: {e.strerror or e}') from None
        if raw.startswith(PNG_SIGNATURE):
            return _decode_png(path)
        if raw.startswith(b'P5'):
            return _decode_pgm(raw)
        if raw[:2] in (b'P3', b'P6'):
            raise ImageFormatError(f'unsupported color format in {path}')
        if raw[:2] in (b'P1', b'P2', b'P4'):
            raise ImageFormatError(f'only binary grayscale PGM (P5) is supported: {path}')
        raise ImageFormatError(f'unrecognised image format: {path}')

    @staticmethod
    def save_image(img, path, bit_depth=8):
        """Save as PGM (.pgm) or PNG (anything else), clipping to [0, 1]"""
        if bit_depth not in (8, 16):
            raise UsageError(f'bit depth must be 8 or 16, got {bit_depth}')
        maxval = 255 if bit_depth == 8 else 65535
        samples = np.rint(np.clip(img.data, 0.0, 1.0) * maxval)
        samples = samples.astype(np.uint8 if bit_depth == 8 else np.uint16)
        with atomic_write(path) as handle:
            if os.path.splitext(path)[1].lower() == '.pgm':
                handle.write(f'P5\n{img.width} {img.height}\n{maxval}\n'.encode('ascii'))
                handle.write(samples.astype('>u2' if bit_depth == 16 else 'u1').tobytes())
            else:
                Image.fromarray(samples).save(handle, format='PNG')
        return path

    @staticmethod
    def is_image_file(path):
        """True when the file starts with a PNG or PNM signature"""
        try:
            with open(path, 'rb') as handle:
                head = handle.read(8)
        except OSError as e:
            raise ImageFormatError(f'cannot read {path}: {e.strerror or e}') from None
        return head.startswith(PNG_SIGNATURE) or (head[:1] == b'P' and head[1:2] in b'123456')

    @staticmethod
    def load_moving(path):
        """A single image becomes a one-channel stack; anything else is read as a manifest"""
        if ImageService.is_image_file(path):
            label = os.path.splitext(os.path.basename(path))[0]
            return SpectralStack((ImageService.load_image(path),), (label,))
        return ImageService.load_stack(path)

    @staticmethod
    def load_stack(manifest):
        """Load channels listed one per line; relative paths resolve against the manifest"""
        try:
            with open(manifest, 'r', encoding='utf-8') as handle:
                lines = handle.read().splitlines()
        except (OSError, UnicodeDecodeError) as e:
            raise ImageFormatError(f'cannot read manifest {manifest}: {e}') from None
        base = os.path.dirname(os.path.abspath(manifest))
        paths = [line.strip() for line in lines]
        paths = [os.path.join(base, p) for p in paths if p and not p.startswith('#')]
        if not paths:
            raise UsageError(f'manifest {manifest} lists no channels')

        channels = []
        for path in paths:
            channel = ImageService.load_image(path)
            if channels and channel.shape != channels[0].shape:
                raise DimensionMismatchError(
                    f'{path} is {channel.width}x{channel.height}, '
                    f'expected {channels[0].width}x{channels[0].height}')
            channels.append(channel)
        labels = [os.path.splitext(os.path.basename(p))[0] for p in paths]
        logger.info('Loaded %d channels from %s', len(channels), manifest)
        return SpectralStack(tuple(channels), tuple(labels))

    @staticmethod
    def select_moving_channel(stack, channel='mean'):
        """Reduce a stack to the single image that drives registration"""
        if channel == 'mean':
            return Image2D(np.mean([c.data for c in stack.channels], axis=0))
        if not isinstance(channel, int) or not 0 <= channel < len(stack):
            raise ConfigError(f'channel {channel!r} is not valid for a {len(stack)}-channel stack')
        return stack.channels[channel]

    @staticmethod
    def normalize_minmax(img):
        """Rescale to [0, 1]; a constant image maps to zeros"""
        low, high = float(img.data.min()), float(img.data.max())
        if high == low:
            return Image2D(np.zeros_like(img.data))
        return Image2D((img.data - low) / (high - low))

    @staticmethod
    def sample_points(data, xs, ys):
        """Bilinear samples of ``data[y, x]`` at arbitrary coordinates.

        Returns ``(values, valid)``; points outside [0, w-1] × [0, h-1] get 0 and valid=False.
        """
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        height, width = data.shape
        valid = (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)
        coords = np.stack([np.where(valid, ys, 0.0), np.where(valid, xs, 0.0)])
        values = ndimage.map_coordinates(data, coords.reshape(2, -1), order=1,
                                         mode='nearest', prefilter=False).reshape(xs.shape)
        values[~valid] = 0.0
        return values, valid

    @staticmethod
    def sample_bilinear(img, x, y):
        """Bilinear intensity at (x, y), or ``None`` outside the image domain"""
        values, valid = ImageService.sample_points(img.data, [x], [y])
        return float(values[0]) if valid[0] else None

    @staticmethod
    def pyramid_depth(width, height, levels):
        """Largest depth ≤ levels whose coarsest side keeps at least 16 pixels"""
        depth = max(1, int(levels))
        while depth > 1 and math.ceil(min(width, height) / 2 ** (depth - 1)) < PYRAMID_MIN_SIDE:
            depth -= 1
        return depth

    @staticmethod
    def build_pyramid(img, levels):
        """Gaussian pyramid, level 0 first; each level smoothed (σ=1) and decimated by 2"""
        if levels < 1:
            raise SpecregError('a pyramid needs at least one level')
        depth = ImageService.pyramid_depth(img.width, img.height, levels)
        if depth < levels:
            logger.debug('Pyramid clamped from %d to %d levels for %dx%d',
                         levels, depth, img.width, img.height)
        pyramid = [img]
        for _ in range(1, depth):
            smoothed = ndimage.gaussian_filter(pyramid[-1].data, sigma=PYRAMID_SIGMA, mode='nearest')
            pyramid.append(Image2D(smoothed[::2, ::2]))
        return pyramid

    @staticmethod
    def sobel_magnitude(img):
        if img.width < 3 or img.height < 3:
            raise SpecregError(f'Sobel needs at least 3x3 pixels, got {img.width}x{img.height}')
        gx = ndimage.sobel(img.data, axis=1, mode='nearest')
        gy = ndimage.sobel(img.data, axis=0, mode='nearest')
        return np.hypot(gx, gy)

    @staticmethod
    def sobel_edge_map(img, percentile=90.0):
        """Edges strictly above the given percentile of interior gradient magnitudes"""
        if not 0 < percentile <= 100:
            raise SpecregError(f'percentile must lie in (0, 100], got {percentile}')
        magnitude = ImageService.sobel_magnitude(img)
        interior = magnitude[1:-1, 1:-1]
        bits = np.zeros(img.shape, dtype=bool)
        bits[1:-1, 1:-1] = interior > np.percentile(interior, percentile)
        return BinaryMask(bits)

    @staticmethod
    def otsu_threshold(img):
        """Otsu split over 256 bins of [0, 1]; returns the threshold value t/256.

        Pixels with value below the threshold form the dark class. Ties go to the lowest t.
        """
        if float(img.data.max()) == float(img.data.min()):
            raise DegenerateImageError('Otsu threshold is undefined for a constant image')
        bins = np.clip(np.floor(img.data * OTSU_BINS), 0, OTSU_BINS - 1).astype(np.int64)
        hist = np.bincount(bins.ravel(), minlength=OTSU_BINS).astype(np.float64)
        prob = hist / hist.sum()
        centers = (np.arange(OTSU_BINS) + 0.5) / OTSU_BINS
        omega = np.cumsum(prob)[:-1]          # weight of bins [0, t) for t = 1..255
        mu = np.cumsum(prob * centers)[:-1]
        mu_total = float(np.sum(prob * centers))
        with np.errstate(divide='ignore', invalid='ignore'):
            between = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
        between[(omega <= 0) | (omega >= 1)] = -np.inf
        best = int(np.argmax(between))
        if not np.isfinite(between[best]):
            raise DegenerateImageError('no Otsu split separates the intensities')
        return (best + 1) / OTSU_BINS

    @staticmethod
    def otsu_mask(img, foreground='dark'):
        """Otsu segmentation; dark foreground selects pixels below the threshold"""
        if foreground not in ('dark', 'light'):
            raise SpecregError(f'foreground must be "dark" or "light", got {foreground!r}')
        threshold = ImageService.otsu_threshold(img)
        dark = np.floor(np.clip(img.data, 0.0, 1.0) * OTSU_BINS) < threshold * OTSU_BINS
        return BinaryMask(dark if foreground == 'dark' else ~dark)

    @staticmethod
    def layer_difference(earlier, later, valid=None):
        """Ink added between two registered scans: max(0, earlier - later), zero outside ``valid``"""
        if earlier.shape != later.shape:
            raise DimensionMismatchError('layer scans must share dimensions')
        added = np.clip(earlier.data - later.data, 0.0, 1.0)
        return Image2D(np.where(as_mask(valid, earlier.shape), added, 0.0))
