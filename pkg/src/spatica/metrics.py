"""Accuracy measures for estimated component maps, masks, and connectivity.

Estimates produced jointly with a mixing matrix are only identified up to
scale, so map comparisons start with a least-squares rescaling onto the
reference. The remaining measures follow the usual definitions: per-pixel
squared error averaged over subjects, Pearson correlation (optionally
restricted to the high-signal region), confusion rates of engagement masks
against reference masks, Dice overlap, and elementwise squared error of
connectivity matrices. A grayscale portable-graymap writer renders any map
to an image for quick inspection.
"""

import warnings
from dataclasses import dataclass

import numpy as np


class ZeroEstimate(ValueError):
    pass


class EmptyTruthRegion(ValueError):
    """No reference location exceeds the restriction threshold."""


class DimsMismatch(ValueError):
    pass


class MalformedImage(ValueError):
    pass


class ZeroFactor(UserWarning):
    """The estimate is orthogonal to the reference; rescaling nulls it."""


def rescale_to_truth(estimate, truth):
    """Multiply `estimate` by the scalar minimizing ||c*estimate - truth||^2.

    The optimal factor is <estimate, truth> / ||estimate||^2, which makes
    the residual orthogonal to the estimate. An estimate orthogonal to the
    reference gets factor 0 (returned as an all-zero map, with a
    ZeroFactor warning); an identically zero estimate cannot be rescaled.
    The operation is idempotent: rescaling the output again is a no-op.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth must have the same shape")
    if not np.any(truth):
        raise ValueError("reference map is identically zero")
    ee = float(np.dot(estimate.ravel(), estimate.ravel()))
    if ee == 0.0:
        raise ZeroEstimate("cannot rescale an identically zero estimate")
    factor = float(np.dot(estimate.ravel(), truth.ravel())) / ee
    if factor == 0.0:
        warnings.warn(ZeroFactor("estimate orthogonal to reference"))
    return factor * estimate


def fisher_z(r):
    """0.5 * ln((1+r)/(1-r)); |r| = 1 maps to signed infinity."""
    with np.errstate(divide="ignore"):
        return np.arctanh(np.asarray(r, dtype=np.float64))


def pearson(a, b):
    """Correlation over a flat pair of maps; 0.0 when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.linalg.norm(ac) * np.linalg.norm(bc)
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(ac, bc) / denom, -1.0, 1.0))


def dice(a, b):
    """2|A&B| / (|A|+|B|); two empty sets count as identical (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks must have the same shape")
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


@dataclass(frozen=True)
class MetricsReport:
    """Per-subject/per-component accuracy tables plus aggregates.

    Array fields are (S, L) unless noted; mask- and connectivity-based
    fields are None when the corresponding inputs were not given.
    mse_map is (L, V): squared error per location averaged over subjects.
    overlap counts |A & B| per mask pair.
    """

    mse_map: np.ndarray
    mse: np.ndarray
    corr: np.ndarray
    corr_z: np.ndarray
    cat: np.ndarray
    cat_z: np.ndarray
    fpr: np.ndarray
    power: np.ndarray
    dice: np.ndarray
    overlap: np.ndarray
    fc_mse: np.ndarray

    def validate(self):
        for name in ("fpr", "power", "dice"):
            v = getattr(self, name)
            if v is not None and v.size and (np.nanmin(v) < 0
                                             or np.nanmax(v) > 1):
                raise ValueError(f"{name} outside [0, 1]")
        if self.corr.size and (self.corr.min() < -1 or self.corr.max() > 1):
            raise ValueError("corr outside [-1, 1]")
        return self


def _rate(flag, truth_flag):
    # flag rate among locations where truth_flag holds; 0 when none do
    denom = int(np.count_nonzero(truth_flag))
    if denom == 0:
        return 0.0
    return np.count_nonzero(flag & truth_flag) / denom


def evaluate(estimates, truths, masks=None, true_masks=None, fc_est=None,
             fc_true=None, cat_threshold=1.0):
    """Compare (S, L, V) estimated maps against reference maps.

    Returns a MetricsReport with squared-error maps and per-subject
    correlation (full and restricted to reference > cat_threshold, both
    raw and Fisher-z). When (S, L, V) boolean masks and reference masks
    are given, adds false positive rate, power, Dice, and overlap size
    per subject and component; when (S, L, L) connectivity matrices are
    given, adds their elementwise squared error averaged over subjects.

    Scan-rescan mode: passing a second session's maps and masks as
    `truths` / `true_masks` yields between-session reliability (corr,
    Dice, overlap) with no ground truth involved; cat_threshold then
    restricts to the second session's high-signal region.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.ndim != 3 or estimates.shape != truths.shape:
        raise ValueError("estimates and truths must both be (S, L, V)")
    n_subj, n_comp, _ = estimates.shape

    err = estimates - truths
    mse_map = (err ** 2).mean(axis=0)
    mse = (err ** 2).mean(axis=2)
    corr = np.empty((n_subj, n_comp))
    cat = np.empty((n_subj, n_comp))
    for s in range(n_subj):
        for l in range(n_comp):
            corr[s, l] = pearson(estimates[s, l], truths[s, l])
            top = truths[s, l] > cat_threshold
            if not np.any(top):
                raise EmptyTruthRegion(
                    f"no reference value over {cat_threshold} for subject "
                    f"{s}, component {l}")
            cat[s, l] = pearson(estimates[s, l][top], truths[s, l][top])

    fpr = power = dice_arr = overlap = None
    if masks is not None:
        if true_masks is None:
            raise ValueError("masks given without true_masks")
        masks = np.asarray(masks, dtype=bool)
        true_masks = np.asarray(true_masks, dtype=bool)
        if masks.shape != estimates.shape or true_masks.shape != masks.shape:
            raise ValueError("masks must be (S, L, V) matching the maps")
        fpr = np.empty((n_subj, n_comp))
        power = np.empty((n_subj, n_comp))
        dice_arr = np.empty((n_subj, n_comp))
        overlap = np.empty((n_subj, n_comp), dtype=np.int64)
        for s in range(n_subj):
            for l in range(n_comp):
                est, ref = masks[s, l], true_masks[s, l]
                fpr[s, l] = _rate(est, ~ref)
                power[s, l] = _rate(est, ref)
                dice_arr[s, l] = dice(est, ref)
                overlap[s, l] = np.count_nonzero(est & ref)

    fc_mse = None
    if fc_est is not None:
        if fc_true is None:
            raise ValueError("fc_est given without fc_true")
        fc_est = np.asarray(fc_est, dtype=np.float64)
        fc_true = np.asarray(fc_true, dtype=np.float64)
        want = (n_subj, n_comp, n_comp)
        if fc_est.shape != want or fc_true.shape != want:
            raise ValueError("connectivity stacks must be (S, L, L)")
        fc_mse = ((fc_est - fc_true) ** 2).mean(axis=0)

    report = MetricsReport(mse_map=mse_map, mse=mse, corr=corr,
                           corr_z=fisher_z(corr), cat=cat,
                           cat_z=fisher_z(cat), fpr=fpr, power=power,
                           dice=dice_arr, overlap=overlap, fc_mse=fc_mse)
    return report.validate()


def emit_heatmap(values, dims, palette_range, path):
    """Render a flat map to a binary 8-bit portable graymap, row-major.

    Values map linearly from palette_range = (lo, hi) onto gray levels
    0..255 and are clipped outside the range. Returns the path written.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    rows, cols = dims
    if rows * cols != values.size:
        raise DimsMismatch(
            f"dims {dims} hold {rows * cols} values, map has {values.size}")
    lo, hi = float(palette_range[0]), float(palette_range[1])
    if not hi > lo:
        raise ValueError("palette_range must satisfy hi > lo")
    unit = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    gray = np.round(255.0 * unit).astype(np.uint8).reshape(rows, cols)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (cols, rows))
        fh.write(gray.tobytes())
    return path


def read_heatmap(path):
    """Read back an 8-bit binary graymap as a (rows, cols) uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment runs to end of line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise MalformedImage(f"{path}: expected binary 8-bit graymap")
    cols, rows = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace byte separates header from raster
    raster = np.frombuffer(blob, dtype=np.uint8, count=rows * cols,
                           offset=pos)
    return raster.reshape(rows, cols).copy()
