"""Population templates and the synthetic-data generator.

A template is a per-component pair of population maps: the mean map and the
between-subject variance map. This module builds such templates from
simulated subject populations and generates the matching noisy fMRI-like
timeseries. All maps travel flattened row-major (length V = rows*cols),
matching the data-vertex order of `mesh.grid_mesh`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d, gaussian_filter

EIGHT_LN_TWO = 8.0 * np.log(2.0)

DEFAULT_DIMS = (46, 55)
DEFAULT_CENTERS = ((12, 15), (35, 40), (15, 40))
DEFAULT_FWHMS = (30.0, 40.0, 45.0)
# Peak amplitude and variance/mean ratio are free parameters of the
# generator; these defaults give SNR close to 0.5 at noise_sd 11.2.
DEFAULT_AMPLITUDE = 6.0
DEFAULT_VAR_SCALE = 0.5
DEFAULT_SMOOTH_FWHM = 5.0
DEFAULT_T = 800
DEFAULT_NOISE_SD = 11.2
DEFAULT_POOL_SIZE = 16


class TooFewSubjects(ValueError):
    pass


class PoolTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    """Population mean and between-subject variance, each (L, V)."""

    mean: np.ndarray
    variance: np.ndarray

    def validate(self):
        if self.mean.shape != self.variance.shape or self.mean.ndim != 2:
            raise ValueError("mean and variance must both be (L, V)")
        if np.any(self.variance < 0):
            raise ValueError("variance must be nonnegative")
        return self

    @property
    def n_components(self):
        return self.mean.shape[0]

    @property
    def n_locations(self):
        return self.mean.shape[1]


@dataclass
class SubjectTruth:
    """Ground truth for one simulated subject.

    ics = population mean + effects, stored explicitly so evaluation reads
    both the total map and the subject-specific deviation. The mixing
    timecourses and noise level are filled in by simulate_timeseries.
    """

    ics: np.ndarray
    effects: np.ndarray
    mixing_timecourses: np.ndarray = None
    noise_sd: float = None


@dataclass(frozen=True)
class PeakSpec:
    center: tuple
    amplitude: float
    fwhm: float


def fwhm_to_sigma(fwhm):
    return fwhm / np.sqrt(EIGHT_LN_TWO)


def gaussian_peak_map(dims, center, amplitude, fwhm):
    """Point mass at `center` convolved with an isotropic Gaussian.

    The kernel has unit peak (not unit mass), so the map's value at the
    center equals `amplitude` exactly.
    """
    rows, cols = dims
    r0, c0 = center
    if fwhm <= 0:
        raise ValueError("fwhm must be positive")
    if not (0 <= r0 < rows and 0 <= c0 < cols):
        raise ValueError(f"center {center} outside dims {dims}")
    sigma = fwhm_to_sigma(fwhm)
    rr = np.arange(rows)[:, None] - r0
    cc = np.arange(cols)[None, :] - c0
    return amplitude * np.exp(-(rr * rr + cc * cc) / (2.0 * sigma * sigma))


def generate_population(dims, specs, var_scale=DEFAULT_VAR_SCALE):
    """Per-component generating mean and variance maps, each (L, rows, cols).

    The generating variance is proportional to the mean: var = var_scale *
    mean, elementwise.
    """
    gen_mean = np.stack([
        gaussian_peak_map(dims, s.center, s.amplitude, s.fwhm) for s in specs
    ])
    gen_var = var_scale * gen_mean
    if np.any(gen_var < 0):
        raise ValueError("negative generating variance; check amplitudes")
    return gen_mean, gen_var


def default_specs(dims=DEFAULT_DIMS, amplitude=DEFAULT_AMPLITUDE):
    return [PeakSpec(c, amplitude, f)
            for c, f in zip(DEFAULT_CENTERS, DEFAULT_FWHMS)]


def _smoothing_kernel(sigma):
    # same discrete support scipy.ndimage uses: radius = int(4*sigma + 0.5)
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def simulate_subject(gen_mean, gen_var, smooth_fwhm=DEFAULT_SMOOTH_FWHM,
                     rng_seed=None):
    """Draw one subject's component maps around the population mean.

    Per component: draw independent N(0, gen_var(v)) deviations, smooth
    with a zero-padded Gaussian, then rescale by one global factor chosen
    so the smoothed field's variance at the peak pixel (argmax of gen_var)
    equals gen_var there. The factor is computed from the kernel, not from
    the realized draw, so the match holds in distribution.
    """
    gen_mean = np.asarray(gen_mean, dtype=np.float64)
    gen_var = np.asarray(gen_var, dtype=np.float64)
    if np.any(gen_var < 0):
        raise ValueError("gen_var must be nonnegative")
    nl = gen_mean.shape[0]
    dims = gen_mean.shape[1:]
    rng = np.random.default_rng(rng_seed)
    sigma = fwhm_to_sigma(smooth_fwhm) if smooth_fwhm > 0 else 0.0

    effects = np.empty((nl,) + dims)
    for l in range(nl):
        raw = rng.standard_normal(dims) * np.sqrt(gen_var[l])
        if sigma > 0:
            sm = gaussian_filter(raw, sigma, mode="constant", cval=0.0)
            k2 = _smoothing_kernel(sigma) ** 2
            var_sm = correlate1d(gen_var[l], k2, axis=0, mode="constant")
            var_sm = correlate1d(var_sm, k2, axis=1, mode="constant")
        else:
            sm = raw
            var_sm = gen_var[l]
        peak = np.unravel_index(np.argmax(gen_var[l]), dims)
        factor = (np.sqrt(gen_var[l][peak] / var_sm[peak])
                  if var_sm[peak] > 0 else 0.0)
        effects[l] = factor * sm

    flat_effects = effects.reshape(nl, -1)
    flat_mean = gen_mean.reshape(nl, -1)
    return SubjectTruth(ics=flat_mean + flat_effects, effects=flat_effects)


def estimate_template(subject_ics):
    """Elementwise sample mean and unbiased sample variance over subjects."""
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in subject_ics])
    if stack.shape[0] < 2:
        raise TooFewSubjects("template estimation needs at least 2 subjects")
    tpl = Template(mean=stack.mean(axis=0), variance=stack.var(axis=0, ddof=1))
    return tpl.validate()


def default_timecourse_pool(t_len=DEFAULT_T, pool_size=DEFAULT_POOL_SIZE):
    """Fixed pool of standardized band-limited Gaussian-process timecourses.

    Deterministic: a fixed internal seed, so every caller sees the same
    pool for a given shape. Frequencies above 1/10 cycles per sample and
    the DC term are removed before standardization.
    """
    rng = np.random.default_rng(2203)
    white = rng.standard_normal((t_len, pool_size))
    spec = np.fft.rfft(white, axis=0)
    freq = np.arange(spec.shape[0])
    band = (freq >= 1) & (freq <= max(2, t_len // 10))
    spec[~band] = 0.0
    smooth = np.fft.irfft(spec, n=t_len, axis=0)
    smooth -= smooth.mean(axis=0)
    smooth /= smooth.std(axis=0, ddof=1)
    return smooth


def _standardize_columns(m):
    m = m - m.mean(axis=0)
    return m / m.std(axis=0, ddof=1)


def simulate_timeseries(truth, timecourse_pool, n_components, noise_sd,
                        rng_seed=None):
    """Noisy T x V observation Y = M S + E, E iid N(0, noise_sd^2).

    M's columns are drawn from the pool without replacement and
    standardized to mean 0, sample SD 1. The sampled M and the noise level
    are recorded on `truth`.
    """
    pool = np.asarray(timecourse_pool, dtype=np.float64)
    t_len, pool_size = pool.shape
    if pool_size < n_components:
        raise PoolTooSmall(
            f"pool has {pool_size} timecourses, need {n_components}")
    if t_len < n_components:
        raise ValueError("timeseries shorter than component count")
    rng = np.random.default_rng(rng_seed)
    cols = rng.choice(pool_size, size=n_components, replace=False)
    mixing = _standardize_columns(pool[:, cols])
    y = mixing @ truth.ics
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(y.shape)
    truth.mixing_timecourses = mixing
    truth.noise_sd = float(noise_sd)
    return y
