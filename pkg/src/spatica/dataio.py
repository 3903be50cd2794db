"""File formats shared by the CLI: headered CSV arrays, tables, templates.

Every numeric array travels as CSV with a `# shape:` comment header so a
round trip restores dtype-exact float64 values (written as %.17g) and the
exact dimensionality. Metrics tables are plain CSV with a column-name
header row. Template directories hold one mean and one variance map per
component, numbered from 1.
"""

import os

import numpy as np

from .template import Template


class MalformedFile(ValueError):
    pass


def save_csv(path, arr):
    """Write a 1-D or 2-D float array with a shape header, %.17g values."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ValueError("only 1-D and 2-D arrays are supported")
    with open(path, "w") as fh:
        fh.write("# shape: " + " ".join(str(s) for s in arr.shape) + "\n")
        rows = arr[None, :] if arr.ndim == 1 else arr
        for row in rows:
            fh.write(",".join("%.17g" % x for x in row) + "\n")


def load_csv(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# shape:"):
            raise MalformedFile(f"{path}: missing shape header")
        shape = tuple(int(t) for t in header[len("# shape:"):].split())
        body = fh.read().split()
    vals = np.array([float(x) for line in body for x in line.split(",")],
                    dtype=np.float64)
    if vals.size != int(np.prod(shape)):
        raise MalformedFile(f"{path}: expected {shape}, got {vals.size} values")
    return vals.reshape(shape)


def save_mask(path, mask):
    """0/1 integer CSV with the same shape header as save_csv."""
    mask = np.asarray(mask)
    if mask.ndim not in (1, 2):
        raise ValueError("only 1-D and 2-D masks are supported")
    with open(path, "w") as fh:
        fh.write("# shape: " + " ".join(str(s) for s in mask.shape) + "\n")
        rows = mask[None, :] if mask.ndim == 1 else mask
        for row in rows:
            fh.write(",".join("1" if x else "0" for x in row) + "\n")


def load_mask(path):
    vals = load_csv(path)
    bad = (vals != 0) & (vals != 1)
    if np.any(bad):
        raise MalformedFile(f"{path}: mask values must be 0 or 1")
    return vals != 0


def write_table(path, columns, rows):
    """Column-name header plus one CSV line per row.

    Cells may be str, int, float, or None (written empty); floats use
    %.17g so reruns of a deterministic pipeline diff byte-identical.
    """
    def cell(x):
        if x is None:
            return ""
        if isinstance(x, str):
            return x
        if isinstance(x, (bool, np.bool_)):
            return "1" if x else "0"
        if isinstance(x, (int, np.integer)):
            return "%d" % x
        return "%.17g" % x

    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            if len(row) != len(columns):
                raise ValueError("row width does not match column count")
            fh.write(",".join(cell(x) for x in row) + "\n")


def read_table(path):
    """Inverse of write_table: (columns, rows of parsed cells).

    Numeric-looking cells come back as float, empty cells as None,
    everything else as str.
    """
    def parse(tok):
        if tok == "":
            return None
        try:
            return float(tok)
        except ValueError:
            return tok

    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise MalformedFile(f"{path}: empty table")
    columns = lines[0].split(",")
    rows = [[parse(t) for t in ln.split(",")] for ln in lines[1:]]
    for row in rows:
        if len(row) != len(columns):
            raise MalformedFile(f"{path}: ragged table")
    return columns, rows


def save_template(dirpath, tpl):
    """mean_<l>.csv / var_<l>.csv per component, numbered from 1."""
    os.makedirs(dirpath, exist_ok=True)
    for l in range(tpl.n_components):
        save_csv(os.path.join(dirpath, f"mean_{l + 1}.csv"), tpl.mean[l])
        save_csv(os.path.join(dirpath, f"var_{l + 1}.csv"), tpl.variance[l])


def load_template(dirpath):
    means = []
    variances = []
    l = 1
    while True:
        mpath = os.path.join(dirpath, f"mean_{l}.csv")
        vpath = os.path.join(dirpath, f"var_{l}.csv")
        if not os.path.exists(mpath):
            break
        if not os.path.exists(vpath):
            raise MalformedFile(f"{dirpath}: mean_{l}.csv without var_{l}.csv")
        means.append(load_csv(mpath))
        variances.append(load_csv(vpath))
        l += 1
    if not means:
        raise MalformedFile(f"{dirpath}: no mean_<l>.csv files found")
    tpl = Template(mean=np.stack(means), variance=np.stack(variances))
    return tpl.validate()
