"""Dataset contract: on-disk format, padding/masking, splits, synthesis.

File format (UTF-8, one JSON object per line):
    line 1   manifest: {"kind": "manifest", "d_mol", "d_dis", "d_txt",
             "encoders": {"molecule", "disease", "text"}, "record_count",
             "phase"}
    line 2+  one trial record per line:
             {"trial_id", "phase", "start_date", "label",
              "molecules": [[f; d_mol], ...], "diseases": [[f; d_dis], ...],
              "inclusion": [statement, ...], "exclusion": [statement, ...]}
    statement = {"first_token": [f; d_txt], "mean": [f; d_txt],
                 "sum": [f; d_txt], "count": int (optional)}

Floats are written with full repr so write -> load round-trips bit-exactly.
Validation fails on the first malformed record, naming the line number.
"""

from __future__ import annotations

import datetime
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

PHASES = ("I", "II", "III")
AGG_FIELDS = ("first_token", "mean", "sum")


@dataclass(eq=False)
class StatementEmbedding:
    """One criteria statement under all three aggregations of its token
    embeddings. When count metadata is present, mean * count == sum must
    hold within 1e-6 per coordinate."""

    first_token: np.ndarray
    mean: np.ndarray
    sum: np.ndarray
    count: int | None = None


@dataclass(eq=False)
class TrialRecord:
    trial_id: str
    phase: str
    start_date: datetime.date
    label: int
    molecules: list[np.ndarray] = field(default_factory=list)
    diseases: list[np.ndarray] = field(default_factory=list)
    inclusion: list[StatementEmbedding] = field(default_factory=list)
    exclusion: list[StatementEmbedding] = field(default_factory=list)


@dataclass
class DatasetManifest:
    d_mol: int
    d_dis: int
    d_txt: int
    encoders: dict[str, str]
    record_count: int
    phase: str


@dataclass
class PaddedBatch:
    """Dense per-mode arrays with validity masks; masked positions are zero.

    Sequences longer than a cap are truncated from the end (earliest entries
    kept). Criteria are carried as two blocks, inclusion then exclusion."""

    mol: np.ndarray  # [B, mol_cap, d_mol]
    dis: np.ndarray  # [B, dis_cap, d_dis]
    inc: np.ndarray  # [B, inc_cap, d_txt]
    exc: np.ndarray  # [B, exc_cap, d_txt]
    mol_mask: np.ndarray
    dis_mask: np.ndarray
    inc_mask: np.ndarray
    exc_mask: np.ndarray
    labels: np.ndarray  # [B] float64 in {0.0, 1.0}


@dataclass
class Splits:
    train: list[TrialRecord]
    valid: list[TrialRecord]
    test: list[TrialRecord]


# ---------------------------------------------------------------------------
# serialization


def _fail(line_no: int, message: str, trial_id: str | None = None) -> DataFormatError:
    where = f"line {line_no}"
    if trial_id:
        where += f" (record {trial_id})"
    return DataFormatError(f"{where}: {message}")


def _require(obj: dict, key: str, line_no: int, trial_id: str | None = None):
    if key not in obj:
        raise _fail(line_no, f"missing field {key!r}", trial_id)
    return obj[key]


def _vector(raw, dim: int, what: str, line_no: int, trial_id: str) -> np.ndarray:
    if not isinstance(raw, list) or len(raw) != dim:
        got = len(raw) if isinstance(raw, list) else type(raw).__name__
        raise _fail(line_no, f"{what} must be a list of {dim} numbers, got {got}", trial_id)
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise _fail(line_no, f"{what} contains a non-numeric entry", trial_id)
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise _fail(line_no, f"{what} contains a non-finite value", trial_id)
    return arr


def _statement(raw, d_txt: int, idx: int, section: str, line_no: int, trial_id: str) -> StatementEmbedding:
    if not isinstance(raw, dict):
        raise _fail(line_no, f"{section}[{idx}] must be an object", trial_id)
    vecs = {}
    for name in AGG_FIELDS:
        vecs[name] = _vector(
            _require(raw, name, line_no, trial_id), d_txt,
            f"{section}[{idx}].{name}", line_no, trial_id,
        )
    count = raw.get("count")
    if count is not None:
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            raise _fail(line_no, f"{section}[{idx}].count must be a positive integer", trial_id)
        if not np.allclose(vecs["mean"] * count, vecs["sum"], atol=1e-6):
            raise _fail(
                line_no, f"{section}[{idx}]: mean * count != sum (beyond 1e-6)", trial_id
            )
    return StatementEmbedding(vecs["first_token"], vecs["mean"], vecs["sum"], count)


def _parse_record(obj: dict, manifest: DatasetManifest, line_no: int) -> TrialRecord:
    trial_id = _require(obj, "trial_id", line_no)
    if not isinstance(trial_id, str) or not trial_id:
        raise _fail(line_no, "trial_id must be a non-empty string")
    phase = _require(obj, "phase", line_no, trial_id)
    if phase not in PHASES:
        raise _fail(line_no, f"phase must be one of {PHASES}, got {phase!r}", trial_id)
    raw_date = _require(obj, "start_date", line_no, trial_id)
    try:
        start = datetime.date.fromisoformat(raw_date)
    except (TypeError, ValueError):
        raise _fail(line_no, f"start_date is not an ISO date: {raw_date!r}", trial_id)
    label = _require(obj, "label", line_no, trial_id)
    if isinstance(label, bool) or label not in (0, 1):
        raise _fail(line_no, f"label must be 0 or 1, got {label!r}", trial_id)

    mols_raw = _require(obj, "molecules", line_no, trial_id)
    dis_raw = _require(obj, "diseases", line_no, trial_id)
    inc_raw = _require(obj, "inclusion", line_no, trial_id)
    exc_raw = _require(obj, "exclusion", line_no, trial_id)
    for name, raw in (("molecules", mols_raw), ("diseases", dis_raw),
                      ("inclusion", inc_raw), ("exclusion", exc_raw)):
        if not isinstance(raw, list):
            raise _fail(line_no, f"{name} must be a list", trial_id)

    molecules = [
        _vector(v, manifest.d_mol, f"molecules[{i}]", line_no, trial_id)
        for i, v in enumerate(mols_raw)
    ]
    diseases = [
        _vector(v, manifest.d_dis, f"diseases[{i}]", line_no, trial_id)
        for i, v in enumerate(dis_raw)
    ]
    inclusion = [
        _statement(s, manifest.d_txt, i, "inclusion", line_no, trial_id)
        for i, s in enumerate(inc_raw)
    ]
    exclusion = [
        _statement(s, manifest.d_txt, i, "exclusion", line_no, trial_id)
        for i, s in enumerate(exc_raw)
    ]
    return TrialRecord(trial_id, phase, start, label, molecules, diseases, inclusion, exclusion)


def _parse_manifest(obj: dict, line_no: int = 1) -> DatasetManifest:
    if not isinstance(obj, dict) or obj.get("kind") != "manifest":
        raise _fail(line_no, 'first line must be a manifest object with "kind": "manifest"')
    dims = {}
    for key in ("d_mol", "d_dis", "d_txt"):
        v = _require(obj, key, line_no)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise _fail(line_no, f"{key} must be a positive integer, got {v!r}")
        dims[key] = v
    encoders = _require(obj, "encoders", line_no)
    if not isinstance(encoders, dict) or set(encoders) != {"molecule", "disease", "text"}:
        raise _fail(line_no, "encoders must map exactly molecule/disease/text to strings")
    if not all(isinstance(v, str) for v in encoders.values()):
        raise _fail(line_no, "encoder provenance entries must be strings")
    count = _require(obj, "record_count", line_no)
    if isinstance(count, bool) or not isinstance(count, int) or count < 0:
        raise _fail(line_no, f"record_count must be a non-negative integer, got {count!r}")
    phase = _require(obj, "phase", line_no)
    if not isinstance(phase, str):
        raise _fail(line_no, "phase must be a string")
    return DatasetManifest(dims["d_mol"], dims["d_dis"], dims["d_txt"], dict(encoders), count, phase)


def load_dataset(path) -> tuple[DatasetManifest, list[TrialRecord]]:
    """Parse and validate a dataset file; fails on the first malformed line."""
    records: list[TrialRecord] = []
    manifest: DatasetManifest | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                raise _fail(line_no, "blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _fail(line_no, f"invalid JSON: {exc.msg}")
            if line_no == 1:
                manifest = _parse_manifest(obj)
            else:
                records.append(_parse_record(obj, manifest, line_no))
    if manifest is None:
        raise DataFormatError("line 1: empty file, manifest required")
    if manifest.record_count != len(records):
        raise DataFormatError(
            f"manifest declares {manifest.record_count} records, file holds {len(records)}"
        )
    return manifest, records


def _statement_obj(s: StatementEmbedding) -> dict:
    obj = {
        "first_token": s.first_token.tolist(),
        "mean": s.mean.tolist(),
        "sum": s.sum.tolist(),
    }
    if s.count is not None:
        obj["count"] = int(s.count)
    return obj


def dataset_bytes(manifest: DatasetManifest, records: list[TrialRecord]) -> bytes:
    """Serialize to the exact bytes save_dataset writes (canonical key order,
    full-precision floats, one trailing newline per line)."""
    out = io.StringIO()
    head = {
        "kind": "manifest",
        "d_mol": manifest.d_mol,
        "d_dis": manifest.d_dis,
        "d_txt": manifest.d_txt,
        "encoders": {k: manifest.encoders[k] for k in ("molecule", "disease", "text")},
        "record_count": len(records),
        "phase": manifest.phase,
    }
    out.write(json.dumps(head, separators=(",", ":")) + "\n")
    for r in records:
        obj = {
            "trial_id": r.trial_id,
            "phase": r.phase,
            "start_date": r.start_date.isoformat(),
            "label": int(r.label),
            "molecules": [m.tolist() for m in r.molecules],
            "diseases": [d.tolist() for d in r.diseases],
            "inclusion": [_statement_obj(s) for s in r.inclusion],
            "exclusion": [_statement_obj(s) for s in r.exclusion],
        }
        out.write(json.dumps(obj, separators=(",", ":")) + "\n")
    return out.getvalue().encode("utf-8")


def save_dataset(path, manifest: DatasetManifest, records: list[TrialRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(manifest, records))


def records_structurally_equal(a: TrialRecord, b: TrialRecord) -> bool:
    if (a.trial_id, a.phase, a.start_date, a.label) != (b.trial_id, b.phase, b.start_date, b.label):
        return False
    if len(a.molecules) != len(b.molecules) or len(a.diseases) != len(b.diseases):
        return False
    if len(a.inclusion) != len(b.inclusion) or len(a.exclusion) != len(b.exclusion):
        return False
    for xs, ys in ((a.molecules, b.molecules), (a.diseases, b.diseases)):
        for x, y in zip(xs, ys):
            if not np.array_equal(x, y):
                return False
    for xs, ys in ((a.inclusion, b.inclusion), (a.exclusion, b.exclusion)):
        for x, y in zip(xs, ys):
            if x.count != y.count:
                return False
            for f in AGG_FIELDS:
                if not np.array_equal(getattr(x, f), getattr(y, f)):
                    return False
    return True


# ---------------------------------------------------------------------------
# batching


def pad_and_mask(
    records: list[TrialRecord],
    manifest: DatasetManifest,
    caps: tuple[int, int, int, int],
    aggregation: str,
) -> PaddedBatch:
    """Pad per-mode sequences to fixed caps with validity masks.

    caps = (mol_cap, dis_cap, inc_cap, exc_cap). aggregation picks which
    statement vector represents each criteria statement."""
    if aggregation not in AGG_FIELDS:
        raise DataFormatError(f"unknown aggregation {aggregation!r}")
    mol_cap, dis_cap, inc_cap, exc_cap = caps
    n = len(records)
    mol = np.zeros((n, mol_cap, manifest.d_mol))
    dis = np.zeros((n, dis_cap, manifest.d_dis))
    inc = np.zeros((n, inc_cap, manifest.d_txt))
    exc = np.zeros((n, exc_cap, manifest.d_txt))
    mol_mask = np.zeros((n, mol_cap), dtype=bool)
    dis_mask = np.zeros((n, dis_cap), dtype=bool)
    inc_mask = np.zeros((n, inc_cap), dtype=bool)
    exc_mask = np.zeros((n, exc_cap), dtype=bool)
    labels = np.zeros(n)

    for i, r in enumerate(records):
        labels[i] = float(r.label)
        for j, v in enumerate(r.molecules[:mol_cap]):
            mol[i, j] = v
            mol_mask[i, j] = True
        for j, v in enumerate(r.diseases[:dis_cap]):
            dis[i, j] = v
            dis_mask[i, j] = True
        for j, s in enumerate(r.inclusion[:inc_cap]):
            inc[i, j] = getattr(s, aggregation)
            inc_mask[i, j] = True
        for j, s in enumerate(r.exclusion[:exc_cap]):
            exc[i, j] = getattr(s, aggregation)
            exc_mask[i, j] = True
    return PaddedBatch(mol, dis, inc, exc, mol_mask, dis_mask, inc_mask, exc_mask, labels)


# ---------------------------------------------------------------------------
# splitting and weighting


def temporal_split(
    records: list[TrialRecord],
    split_date: datetime.date,
    validation_fraction: float,
    seed: int,
) -> Splits:
    """Trials starting on/after split_date form the test set; a seeded
    floor(fraction * n) subset of the rest becomes validation. All three
    partitions preserve the input record order."""
    test = [r for r in records if r.start_date >= split_date]
    rest = [r for r in records if r.start_date < split_date]
    if not test or not rest:
        warnings.warn(
            f"split date {split_date.isoformat()} leaves an empty partition "
            f"(test={len(test)}, pre-split={len(rest)})"
        )
    k = int(validation_fraction * len(rest))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    chosen = set(rng.permutation(len(rest))[:k].tolist())
    valid = [r for i, r in enumerate(rest) if i in chosen]
    train = [r for i, r in enumerate(rest) if i not in chosen]
    return Splits(train=train, valid=valid, test=test)


def class_weights(labels) -> tuple[float, float]:
    """(w0, w1) = (negative fraction, positive fraction); sums to 1 exactly."""
    arr = np.asarray(labels, dtype=np.float64)
    if arr.size == 0:
        raise DataFormatError("class_weights of an empty label set")
    n_neg = int(np.sum(arr == 0.0))
    n_pos = arr.size - n_neg
    if n_neg == 0 or n_pos == 0:
        warnings.warn("single-class label set: weighted BCE degenerates to one term")
    w0 = n_neg / arr.size
    return w0, 1.0 - w0


# ---------------------------------------------------------------------------
# synthesis


# Mixture geometry (fixed; calibrated once against the closed-form linear
# discriminant probe in the tests). Informative tokens sit at +CARRIER_OFFSET
# along a per-mode carrier direction plus a label-signed offset along an
# orthogonal label direction; distractor tokens sit at -CARRIER_OFFSET with
# no label term, so selection has something real to prune.
CARRIER_OFFSET = 1.5
LABEL_OFFSET = 2.0
TOKEN_NOISE = 1.0
STATEMENT_TOKEN_NOISE = 0.5
INFORMATIVE_PROB = 0.5
SYNTH_ENCODER_TAG = "synthetic-mixture/1"


def synthesize(
    n: int,
    seed: int,
    separability: float,
    d_mol: int = 32,
    d_dis: int = 16,
    d_txt: int = 64,
) -> tuple[DatasetManifest, list[TrialRecord]]:
    """Generate n labelled trials whose class separation scales with
    separability (0 = labels carry no information about features).

    Deterministic in (n, seed, separability, dims): same arguments, same
    records, same serialized bytes. Start dates advance one day per record
    from 2010-01-01 so temporal splitting behaves naturally."""
    if n < 1:
        raise DataFormatError("synthesize needs n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))

    def directions(dim: int) -> tuple[np.ndarray, np.ndarray]:
        carrier = rng.normal(size=dim)
        carrier /= np.linalg.norm(carrier)
        label_dir = rng.normal(size=dim)
        label_dir -= carrier * (carrier @ label_dir)
        label_dir /= np.linalg.norm(label_dir)
        return carrier, label_dir

    mol_c, mol_u = directions(d_mol)
    dis_c, dis_u = directions(d_dis)
    txt_c, txt_u = directions(d_txt)

    def token_mean(carrier, label_dir, y: int) -> np.ndarray:
        if rng.random() < INFORMATIVE_PROB:
            sign = 1.0 if y == 1 else -1.0
            return CARRIER_OFFSET * carrier + sign * separability * LABEL_OFFSET * label_dir
        return -CARRIER_OFFSET * carrier

    base = datetime.date(2010, 1, 1)
    records: list[TrialRecord] = []
    for i in range(n):
        y = int(rng.integers(0, 2))
        molecules = [
            token_mean(mol_c, mol_u, y) + TOKEN_NOISE * rng.normal(size=d_mol)
            for _ in range(int(rng.integers(2, 6)))
        ]
        diseases = [
            token_mean(dis_c, dis_u, y) + TOKEN_NOISE * rng.normal(size=d_dis)
            for _ in range(int(rng.integers(2, 6)))
        ]

        def statement(y: int) -> StatementEmbedding:
            mu = token_mean(txt_c, txt_u, y)
            k = int(rng.integers(2, 7))
            toks = mu + STATEMENT_TOKEN_NOISE * rng.normal(size=(k, d_txt))
            total = toks.sum(axis=0)
            return StatementEmbedding(
                first_token=toks[0], mean=total / k, sum=total, count=k
            )

        inclusion = [statement(y) for _ in range(int(rng.integers(2, 9)))]
        exclusion = [statement(y) for _ in range(int(rng.integers(0, 6)))]
        records.append(
            TrialRecord(
                trial_id=f"SYN-{i:06d}",
                phase="II",
                start_date=base + datetime.timedelta(days=i),
                label=y,
                molecules=molecules,
                diseases=diseases,
                inclusion=inclusion,
                exclusion=exclusion,
            )
        )
    manifest = DatasetManifest(
        d_mol=d_mol,
        d_dis=d_dis,
        d_txt=d_txt,
        encoders={
            "molecule": SYNTH_ENCODER_TAG,
            "disease": SYNTH_ENCODER_TAG,
            "text": SYNTH_ENCODER_TAG,
        },
        record_count=n,
        phase="II",
    )
    return manifest, records
