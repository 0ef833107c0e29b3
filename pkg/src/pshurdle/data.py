"""Observation container and its CSV schema.

CSV header: ``x,y,z,value,source,vessel_id``.  ``value`` is empty exactly
when ``z == 0``; ``source`` is ``FID`` or ``FDD``; ``vessel_id`` is an
optional positive integer (empty means the reference vessel).
"""

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError

FID = "FID"
FDD = "FDD"
CSV_COLUMNS = ("x", "y", "z", "value", "source", "vessel_id")


def fmt(value):
    """Float formatting used for every numeric file the package writes."""
    return format(float(value), ".17g")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Tagged point observations.

    Attributes
    ----------
    locations : ndarray, shape (n, 2)
    z : ndarray of int8
        Presence indicator.
    y : ndarray of float
        Positive biomass where ``z == 1``, NaN elsewhere.
    is_fdd : ndarray of bool
        True for fishery-dependent rows, False for survey rows.
    vessel_id : ndarray of int
        Vessel index (1 is the reference vessel); 0 means not recorded.
    """

    locations: np.ndarray
    z: np.ndarray
    y: np.ndarray
    is_fdd: np.ndarray
    vessel_id: np.ndarray

    def __post_init__(self):
        n = self.z.shape[0]
        if self.locations.shape != (n, 2):
            raise InvalidArgumentError("locations must have shape (n, 2)")
        for name in ("y", "is_fdd", "vessel_id"):
            if getattr(self, name).shape != (n,):
                raise InvalidArgumentError(f"{name} must have length {n}")
        if not np.all(np.isin(self.z, (0, 1))):
            raise InvalidArgumentError("z must be binary")
        present = self.z == 1
        if np.any(np.isnan(self.y[present])) or np.any(self.y[present] <= 0):
            raise InvalidArgumentError("y must be positive wherever z == 1")
        if np.any(~np.isnan(self.y[~present])):
            raise InvalidArgumentError("y must be absent wherever z == 0")
        if np.any(self.vessel_id < 0):
            raise InvalidArgumentError("vessel ids must be positive")

    @classmethod
    def from_arrays(cls, locations, z, y, source=None, vessel_id=None):
        """Build a dataset; ``y`` may carry zeros or NaN where ``z == 0``."""
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        z = np.asarray(z).astype(np.int8)
        y = np.asarray(y, dtype=float).copy()
        y[z == 0] = np.nan
        n = z.shape[0]
        if source is None:
            is_fdd = np.zeros(n, dtype=bool)
        else:
            source = np.asarray(source)
            if source.dtype == bool:
                is_fdd = source
            else:
                unknown = ~np.isin(source, (FID, FDD))
                if np.any(unknown):
                    raise InvalidArgumentError(f"unknown source tag {source[unknown][0]!r}")
                is_fdd = source == FDD
        vid = np.zeros(n, dtype=np.int64) if vessel_id is None else np.asarray(vessel_id, dtype=np.int64)
        return cls(locations, z, y, np.asarray(is_fdd, dtype=bool), vid)

    @classmethod
    def empty(cls):
        return cls.from_arrays(np.zeros((0, 2)), np.zeros(0), np.zeros(0))

    def __len__(self):
        return self.z.shape[0]

    @property
    def n_fid(self):
        return int(np.sum(~self.is_fdd))

    @property
    def n_fdd(self):
        return int(np.sum(self.is_fdd))

    @property
    def source(self):
        return np.where(self.is_fdd, FDD, FID)

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(
            self.locations[mask], self.z[mask], self.y[mask], self.is_fdd[mask], self.vessel_id[mask]
        )

    def concat(self, other):
        return Dataset(
            np.vstack([self.locations, other.locations]),
            np.concatenate([self.z, other.z]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.is_fdd, other.is_fdd]),
            np.concatenate([self.vessel_id, other.vessel_id]),
        )

    def zero_summary(self):
        """Per source: number of rows, number of presences and presence share."""
        out = {}
        for tag, mask in ((FID, ~self.is_fdd), (FDD, self.is_fdd)):
            n = int(mask.sum())
            pos = int(self.z[mask].sum())
            out[tag] = {"n": n, "positive": pos, "positive_share": pos / n if n else float("nan")}
        return out


def write_dataset_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for (x, y), z, v, fdd, vid in zip(
            dataset.locations, dataset.z, dataset.y, dataset.is_fdd, dataset.vessel_id
        ):
            w.writerow([
                fmt(x), fmt(y), int(z), fmt(v) if z else "",
                FDD if fdd else FID, int(vid) if vid else "",
            ])


def load_dataset_csv(path):
    """Read and validate a dataset CSV.

    Raises
    ------
    InvalidArgumentError
        Listing every malformed row by its line number.
    """
    locs, zs, ys, srcs, vids = [], [], [], [], []
    errors = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise InvalidArgumentError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                parsed = _parse_row(row)
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            loc, z, val, src, vid = parsed
            locs.append(loc)
            zs.append(z)
            ys.append(val)
            srcs.append(src)
            vids.append(vid)
    if errors:
        raise InvalidArgumentError(f"{path}: malformed rows\n" + "\n".join(errors))
    if not zs:
        return Dataset.empty()
    return Dataset.from_arrays(np.array(locs), np.array(zs), np.array(ys), np.array(srcs), np.array(vids))


def _parse_row(row):
    if len(row) != len(CSV_COLUMNS):
        raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
    x, y, z, value, source, vessel = (c.strip() for c in row)
    loc = (float(x), float(y))
    if not all(np.isfinite(loc)):
        raise ValueError("non-finite coordinate")
    if z not in ("0", "1"):
        raise ValueError(f"z must be 0 or 1, got {z!r}")
    z = int(z)
    if z == 1:
        if not value:
            raise ValueError("z=1 requires a value")
        val = float(value)
        if not (np.isfinite(val) and val > 0):
            raise ValueError(f"value must be positive, got {value!r}")
    else:
        if value:
            raise ValueError("value must be empty when z=0")
        val = np.nan
    if source not in (FID, FDD):
        raise ValueError(f"source must be FID or FDD, got {source!r}")
    vid = 0
    if vessel:
        vid = int(vessel)
        if vid < 1:
            raise ValueError(f"vessel_id must be a positive integer, got {vessel!r}")
    return loc, z, val, source, vid
