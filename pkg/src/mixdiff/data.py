"""Corpus handling: synthetic generators, missingness, scaling, CSV I/O.

A sample couples three aligned matrices over one time axis of length L:
numerical channels [P_r, L] with NaN at missing entries, categorical
channels [P_d, L] as integer codes, and a binary missingness mask
[P_r, L] (0 present, 1 missing) paired with the numerical channels.

The on-disk format is one delimited file with a row per channel:
    sample_id,channel,kind,t0,...,t{L-1}
where kind is num, cat or mask.  Missing numerical entries are empty
cells and must agree with the mask rows.  A small key-value sidecar
(<path>.stats) records per-channel scaling statistics and category
counts so a corpus can be interpreted without rescanning it.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(Exception):
    """A corpus file or its sidecar violates the expected format."""


@dataclass
class TimeSeriesSample:
    """One multivariate series; x is NaN where m is 1."""

    x: np.ndarray
    c: np.ndarray
    m: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.int64)
        self.m = np.asarray(self.m, dtype=np.int64)
        if self.x.ndim != 2 or self.c.ndim != 2 or self.m.ndim != 2:
            raise ValueError("x, c and m must all be 2-D")
        lengths = {a.shape[1] for a in (self.x, self.c, self.m) if a.shape[0]}
        if len(lengths) > 1:
            raise ValueError(f"inconsistent sequence lengths {lengths}")
        if self.m.shape != self.x.shape:
            raise ValueError("mask must mirror the numerical channels")
        if not np.all((self.m == 0) | (self.m == 1)):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def length(self) -> int:
        for a in (self.x, self.c, self.m):
            if a.shape[0]:
                return a.shape[1]
        return self.x.shape[1]


@dataclass(frozen=True)
class CorpusLayout:
    num_channels: int
    cat_ks: tuple[int, ...]
    length: int


@dataclass(frozen=True)
class CorpusStats:
    """Per-numerical-channel statistics from observed entries only."""

    minimum: np.ndarray
    maximum: np.ndarray
    mean: np.ndarray


def derive_mask(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a matrix with NaN holes into (mask, values).

    The mask is 1 at missing entries.  Channels that are entirely
    missing are allowed but warned about, since nothing can be learned
    from them.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.isnan(raw).astype(np.int64)
    full = np.where(mask.all(axis=1))[0]
    if full.size:
        warnings.warn(f"channel(s) {full.tolist()} have no observed values")
    return mask, raw


def compute_stats(samples: list[TimeSeriesSample]) -> CorpusStats:
    """Min, max and mean per numerical channel over observed entries."""
    if not samples:
        raise ValueError("cannot compute statistics of an empty corpus")
    p = samples[0].x.shape[0]
    stacked = np.concatenate([s.x for s in samples], axis=1) if p else np.zeros((0, 0))
    counts = (~np.isnan(stacked)).sum(axis=1) if p else np.zeros(0)
    if p and np.any(counts == 0):
        bad = np.where(counts == 0)[0].tolist()
        raise DataError(f"numerical channel(s) {bad} have no observed values")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return CorpusStats(minimum=np.nanmin(stacked, axis=1) if p else np.zeros(0),
                           maximum=np.nanmax(stacked, axis=1) if p else np.zeros(0),
                           mean=np.nanmean(stacked, axis=1) if p else np.zeros(0))


def impute_and_scale(raw: np.ndarray, mask: np.ndarray,
                     stats: CorpusStats) -> np.ndarray:
    """Fill missing entries with the channel mean, then min-max to [0, 1].

    Values outside the reference range map outside [0, 1]; nothing is
    clipped here.  A constant channel maps to 0.5 everywhere.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask)
    filled = np.where(mask == 1, stats.mean[:, None], raw)
    if np.any(np.isnan(filled)):
        raise ValueError("unmasked NaN entries in numerical data")
    span = stats.maximum - stats.minimum
    out = np.empty_like(filled)
    flat = span == 0
    out[flat] = 0.5
    out[~flat] = (filled[~flat] - stats.minimum[~flat, None]) / span[~flat, None]
    return out


def descale(scaled: np.ndarray, stats: CorpusStats) -> np.ndarray:
    """Invert the min-max map; constant channels return their minimum."""
    span = stats.maximum - stats.minimum
    return stats.minimum[:, None] + np.asarray(scaled) * span[:, None]


def make_sine_corpus(n: int, num_channels: int, length: int,
                     seed: int) -> list[TimeSeriesSample]:
    """Noisy sinusoids with per-channel random frequency, phase, amplitude.

    Frequencies span half a cycle to four cycles over the window, so
    neighbouring steps stay strongly correlated.
    """
    rng = np.random.default_rng(seed)
    steps = np.arange(length)
    out = []
    for _ in range(n):
        freq = rng.uniform(0.5 / length, 4.0 / length, size=(num_channels, 1))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(num_channels, 1))
        amp = rng.uniform(0.4, 1.0, size=(num_channels, 1))
        x = amp * np.sin(2.0 * np.pi * freq * steps + phase)
        x += 0.02 * rng.standard_normal(x.shape)
        out.append(TimeSeriesSample(x=x,
                                    c=np.zeros((0, length), dtype=np.int64),
                                    m=np.zeros((num_channels, length), dtype=np.int64)))
    return out


def make_markov_corpus(n: int, cat_channels: int, length: int,
                       num_categories: int, seed: int,
                       mask_channels: int = 0, self_prob: float = 0.8,
                       missing_prob: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Sticky Markov chains plus independent Bernoulli missingness masks.

    Each categorical channel keeps its state with probability
    self_prob and otherwise jumps uniformly to one of the others.
    Returns (codes [n, cat_channels, L], masks [n, mask_channels, L]);
    the masks are missing-completely-at-random with the given rate,
    meant to be paired with numerical channels by the caller.
    """
    if num_categories < 2:
        raise ValueError("need at least 2 categories")
    rng = np.random.default_rng(seed)
    codes = np.zeros((n, cat_channels, length), dtype=np.int64)
    if cat_channels:
        state = rng.integers(0, num_categories, size=(n, cat_channels))
        codes[:, :, 0] = state
        for l in range(1, length):
            jump = rng.random((n, cat_channels)) >= self_prob
            offset = rng.integers(1, num_categories, size=(n, cat_channels))
            state = np.where(jump, (state + offset) % num_categories, state)
            codes[:, :, l] = state
    masks = (rng.random((n, mask_channels, length)) < missing_prob).astype(np.int64)
    return codes, masks


def make_mixed_corpus(n: int, num_channels: int, cat_channels: int,
                      num_categories: int, length: int, missing_rate: float,
                      seed: int) -> list[TimeSeriesSample]:
    """Sine numerical channels joined with Markov categories and MCAR holes."""
    sines = make_sine_corpus(n, num_channels, length, seed)
    codes, masks = make_markov_corpus(n, cat_channels, length, num_categories,
                                      seed + 1, mask_channels=num_channels,
                                      missing_prob=missing_rate)
    out = []
    for i, s in enumerate(sines):
        x = s.x.copy()
        x[masks[i] == 1] = np.nan
        out.append(TimeSeriesSample(x=x, c=codes[i], m=masks[i]))
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def write_corpus(path, samples: list[TimeSeriesSample],
                 stats: CorpusStats | None = None,
                 length: int | None = None) -> None:
    """Write the corpus and its .stats sidecar; see the module docstring.

    An empty corpus is written as a header-only file (length must then
    be given, since no sample can supply it) and gets no sidecar.
    """
    if not samples and length is None:
        raise ValueError("an empty corpus needs an explicit length")
    path = Path(path)
    L = samples[0].length if samples else length
    if not samples:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["sample_id", "channel", "kind"]
                                    + [f"t{l}" for l in range(L)])
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "channel", "kind"]
                        + [f"t{l}" for l in range(L)])
        for i, s in enumerate(samples):
            if s.length != L:
                raise ValueError(f"sample {i} has length {s.length}, expected {L}")
            for p in range(s.x.shape[0]):
                cells = ["" if s.m[p, l] else _fmt(s.x[p, l]) for l in range(L)]
                writer.writerow([i, p, "num"] + cells)
            for p in range(s.c.shape[0]):
                writer.writerow([i, p, "cat"] + [str(int(v)) for v in s.c[p]])
            for p in range(s.m.shape[0]):
                writer.writerow([i, p, "mask"] + [str(int(v)) for v in s.m[p]])
    if stats is None and samples[0].x.shape[0]:
        stats = compute_stats(samples)
    write_stats(str(path) + ".stats", samples, stats)


def write_stats(path, samples: list[TimeSeriesSample],
                stats: CorpusStats | None) -> None:
    layout = corpus_layout(samples)
    lines = [f"samples={len(samples)}", f"length={layout.length}",
             f"num_channels={layout.num_channels}",
             f"cat_channels={len(layout.cat_ks)}"]
    for p in range(layout.num_channels):
        lines.append(f"num{p}.min={_fmt(stats.minimum[p])}")
        lines.append(f"num{p}.max={_fmt(stats.maximum[p])}")
        lines.append(f"num{p}.mean={_fmt(stats.mean[p])}")
    for p, k in enumerate(layout.cat_ks):
        lines.append(f"cat{p}.categories={k}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_stats(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing stats sidecar {path}")
    entries: dict[str, str] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path} line {ln}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def stats_from_sidecar(path) -> tuple[CorpusStats, tuple[int, ...]]:
    """Load scaling statistics and category counts for a corpus file."""
    entries = read_stats(path)
    try:
        p = int(entries["num_channels"])
        pc = int(entries["cat_channels"])
        stats = CorpusStats(
            minimum=np.array([float(entries[f"num{i}.min"]) for i in range(p)]),
            maximum=np.array([float(entries[f"num{i}.max"]) for i in range(p)]),
            mean=np.array([float(entries[f"num{i}.mean"]) for i in range(p)]))
        ks = tuple(int(entries[f"cat{i}.categories"]) for i in range(pc))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed stats sidecar ({exc})") from exc
    return stats, ks


def read_corpus(path) -> list[TimeSeriesSample]:
    """Parse a corpus file, validating shape and mask consistency."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such corpus file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header") from None
        if header[:3] != ["sample_id", "channel", "kind"]:
            raise DataError(f"{path}: header must start with sample_id,channel,kind")
        L = len(header) - 3
        if L < 1 or header[3:] != [f"t{l}" for l in range(L)]:
            raise DataError(f"{path}: time columns must be t0..t{{L-1}}")

        rows: dict[str, dict[str, dict[int, list]]] = {}
        order: list[str] = []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != L + 3:
                raise DataError(f"{path} line {ln}: expected {L + 3} cells, "
                                f"got {len(row)}")
            sid, chan_s, kind = row[0], row[1], row[2]
            if kind not in ("num", "cat", "mask"):
                raise DataError(f"{path} line {ln}: unknown kind {kind!r}")
            try:
                chan = int(chan_s)
            except ValueError:
                raise DataError(f"{path} line {ln}: bad channel index "
                                f"{chan_s!r}") from None
            if sid not in rows:
                rows[sid] = {"num": {}, "cat": {}, "mask": {}}
                order.append(sid)
            if chan in rows[sid][kind]:
                raise DataError(f"{path} line {ln}: duplicate {kind} channel {chan}")
            rows[sid][kind][chan] = (ln, row[3:])

    samples = []
    shape_ref: tuple | None = None
    for sid in order:
        by_kind = rows[sid]
        shape = tuple(sorted(by_kind[k]) for k in ("num", "cat", "mask"))
        if shape_ref is None:
            shape_ref = shape
            for kind in ("num", "cat", "mask"):
                chans = sorted(by_kind[kind])
                if chans != list(range(len(chans))):
                    raise DataError(f"{path}: sample {sid} {kind} channels "
                                    f"{chans} are not contiguous from 0")
        elif shape != shape_ref:
            raise DataError(f"{path}: sample {sid} has a different channel "
                            "layout from the first sample")
        pn, pc = len(by_kind["num"]), len(by_kind["cat"])
        x = np.zeros((pn, L))
        c = np.zeros((pc, L), dtype=np.int64)
        m = np.zeros((pn, L), dtype=np.int64)
        for p in range(pn):
            ln, cells = by_kind["num"][p]
            for l, cell in enumerate(cells):
                if cell == "":
                    x[p, l] = np.nan
                else:
                    try:
                        x[p, l] = float(cell)
                    except ValueError:
                        raise DataError(f"{path} line {ln}: bad numeric cell "
                                        f"{cell!r}") from None
        for p in range(pc):
            ln, cells = by_kind["cat"][p]
            try:
                c[p] = [int(cell) for cell in cells]
            except ValueError:
                raise DataError(f"{path} line {ln}: categorical cells must be "
                                "integers (no missing allowed)") from None
            if np.any(c[p] < 0):
                raise DataError(f"{path} line {ln}: negative category code")
        if by_kind["mask"]:
            if len(by_kind["mask"]) != pn:
                raise DataError(f"{path}: sample {sid} has {len(by_kind['mask'])} "
                                f"mask rows for {pn} numerical rows")
            for p in range(pn):
                ln, cells = by_kind["mask"][p]
                try:
                    m[p] = [int(cell) for cell in cells]
                except ValueError:
                    raise DataError(f"{path} line {ln}: mask cells must be "
                                    "integers") from None
                if not np.all((m[p] == 0) | (m[p] == 1)):
                    raise DataError(f"{path} line {ln}: mask cells must be 0 or 1")
                empty = np.isnan(x[p])
                if not np.array_equal(empty, m[p] == 1):
                    l = int(np.argmax(empty != (m[p] == 1)))
                    raise DataError(f"{path} line {ln}: mask disagrees with "
                                    f"empty cells at t{l}")
        else:
            m = np.isnan(x).astype(np.int64)
        samples.append(TimeSeriesSample(x=x, c=c, m=m))
    return samples


def corpus_layout(samples: list[TimeSeriesSample],
                  cat_ks: tuple[int, ...] | None = None) -> CorpusLayout:
    """Shape summary; category counts come from the data unless given."""
    if not samples:
        raise ValueError("empty corpus has no layout")
    first = samples[0]
    if cat_ks is None:
        pc = first.c.shape[0]
        if pc:
            maxes = np.max([s.c.max(axis=1) for s in samples], axis=0)
            cat_ks = tuple(int(v) + 1 for v in maxes)
            cat_ks = tuple(max(k, 2) for k in cat_ks)
        else:
            cat_ks = ()
    if len(cat_ks) != first.c.shape[0]:
        raise ValueError(f"{len(cat_ks)} category counts for "
                         f"{first.c.shape[0]} categorical channels")
    return CorpusLayout(num_channels=first.x.shape[0], cat_ks=cat_ks,
                        length=first.length)
