"""Reading and writing panels, fitted models and result tables.

All writes go to a temporary file in the target directory which is then
renamed over the destination, so a crash never leaves a half-written file.
Floats in result tables are written with 6 significant digits.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io as _io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import DropoutSpec, NetworkParams, NetworkTopology, OutcomeFamily, ProviderPanel

ARTIFACT_VERSION = 1
FLOAT_FORMAT = "%.6g"

# ICD-10 diagnosis codes marking a readmission as planned. Shipped for reference
# when preparing readmission outcomes from claims; nothing here applies them.
PLANNED_READMISSION_ICD10 = (
    "Z44001", "Z44002", "Z44009", "Z44011", "Z44012", "Z44019", "Z44021", "Z44022", "Z44029",
    "Z44101", "Z44102", "Z44109", "Z44111", "Z44112", "Z44119", "Z44121", "Z44122", "Z44129",
    "Z4430", "Z4431", "Z4432", "Z448", "Z449", "Z451", "Z4531", "Z45320", "Z45321", "Z45328",
    "Z4541", "Z4542", "Z4549", "Z45811", "Z45812", "Z45819", "Z4682", "Z4689", "Z469", "Z510",
    "Z5111", "Z5112",
)


class PanelParseError(ValueError):
    """Malformed panel file; ``line`` is the 1-based line number in the file."""

    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        self.line = line
        self.column = column
        where = "" if line is None else f"line {line}: "
        super().__init__(where + message)

    def as_dict(self) -> dict:
        return {"error": "parse", "line": self.line, "column": self.column, "message": str(self)}


# ---------------------------------------------------------------------------
# Atomic writes and number formatting
# ---------------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return FLOAT_FORMAT % v
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, csv_text(header, rows))


# ---------------------------------------------------------------------------
# Panels
# ---------------------------------------------------------------------------


def expand_categorical(values: Sequence[str], name: str) -> tuple[np.ndarray, list[str]]:
    """One-hot columns for a categorical covariate, dropping the first sorted level."""
    levels = sorted(set(values))
    kept = levels[1:]
    out = np.zeros((len(values), len(kept)))
    pos = {lv: k for k, lv in enumerate(kept)}
    for r, v in enumerate(values):
        if v in pos:
            out[r, pos[v]] = 1.0
    return out, [f"{name}={lv}" for lv in kept]


def load_panel(csv_path, family: OutcomeFamily | str | None = None,
               categorical: Sequence[str] = ()) -> ProviderPanel:
    """Read ``provider_id, outcome, covariate...`` rows into a panel.

    Providers are indexed in order of first appearance. Columns named in
    ``categorical`` are one-hot expanded with the first sorted level as the
    reference; every other covariate must be numeric.
    """
    path = Path(csv_path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise PanelParseError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelParseError("empty file", 1) from None
        for k, name in enumerate(("provider_id", "outcome")):
            if len(header) <= k or header[k] != name:
                raise PanelParseError(f"column {k + 1} must be '{name}'", 1, name)
        cov_names = header[2:]
        if not cov_names:
            raise PanelParseError("no covariate columns", 1)
        missing = [c for c in categorical if c not in cov_names]
        if missing:
            raise PanelParseError(f"categorical columns not in header: {missing}", 1)
        cat_pos = {cov_names.index(c) for c in categorical}
        ids: list[str] = []
        index: dict[str, int] = {}
        pidx, y = [], []
        numeric: list[list[float]] = []
        cats: list[list[str]] = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelParseError(f"expected {len(header)} fields, found {len(row)}", line)
            pid = row[0].strip()
            if not pid:
                raise PanelParseError("empty provider_id", line, "provider_id")
            if pid not in index:
                index[pid] = len(ids)
                ids.append(pid)
            pidx.append(index[pid])
            y.append(_number(row[1], line, "outcome"))
            numeric.append([_number(row[2 + k], line, cov_names[k])
                            for k in range(len(cov_names)) if k not in cat_pos])
            cats.append([row[2 + k].strip() for k in sorted(cat_pos)])
    if not ids:
        raise PanelParseError("no data rows", 2)
    Z = np.array(numeric, dtype=float).reshape(len(y), -1)
    for k, col in enumerate(sorted(cat_pos)):
        dummies, _ = expand_categorical([c[k] for c in cats], cov_names[col])
        Z = np.hstack([Z, dummies])
    panel = ProviderPanel(ids, np.array(y), Z, np.array(pidx))
    if family is not None:
        kind = family.kind if isinstance(family, OutcomeFamily) else family
        _check_outcomes(np.array(y), kind)
        panel.validate(family)
    return panel


def _number(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise PanelParseError(f"non-numeric value {text!r} in column '{column}'", line, column) from None
    if not math.isfinite(value):
        raise PanelParseError(f"non-finite value in column '{column}'", line, column)
    return value


def _check_outcomes(y: np.ndarray, kind: str) -> None:
    # row numbers refer to file order, so check before the panel regroups rows
    if kind == "bernoulli":
        bad = np.flatnonzero((y != 0) & (y != 1))
        what = "0 or 1"
    elif kind == "poisson":
        bad = np.flatnonzero((y < 0) | (y != np.floor(y)))
        what = "a nonnegative integer"
    else:
        return
    if bad.size:
        raise PanelParseError(f"outcome {y[bad[0]]:g} is not {what} for the {kind} family",
                              int(bad[0]) + 2, "outcome")


def save_panel(panel: ProviderPanel, csv_path, covariate_names: Sequence[str] | None = None) -> None:
    """Write a panel in the layout read by :func:`load_panel`, floats in round-trip form."""
    names = list(covariate_names or [f"z{k + 1}" for k in range(panel.p0)])
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["provider_id", "outcome", *names])
    for k in range(panel.n):
        writer.writerow([panel.provider_ids[panel.provider_index[k]], repr(float(panel.outcomes[k])),
                         *[repr(float(v)) for v in panel.covariates[k]]])
    atomic_write_text(csv_path, buf.getvalue())


def panel_hash(panel: ProviderPanel) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(panel.provider_ids).encode())
    for arr in (panel.provider_index.astype(np.int64), panel.outcomes, panel.covariates):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def describe_panel(panel: ProviderPanel) -> dict[str, int]:
    return {"m": panel.m, "n": panel.n, "min_size": int(panel.sizes.min()),
            "max_size": int(panel.sizes.max()), "p0": panel.p0}


# ---------------------------------------------------------------------------
# Fitted model artifacts
# ---------------------------------------------------------------------------


class ArtifactError(ValueError):
    pass


@dataclass
class ModelArtifact:
    """Everything needed to reuse a fitted model on new rows of the same providers."""

    topology: NetworkTopology
    params: NetworkParams
    provider_ids: list[str]
    family: OutcomeFamily
    dropout: DropoutSpec | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": ARTIFACT_VERSION,
            "topology": {"layer_sizes": list(self.topology.layer_sizes),
                         "activations": list(self.topology.activations)},
            "family": {"kind": self.family.kind, "sigma2_hat": self.family.sigma2_hat},
            "dropout": None if self.dropout is None else {"retention_prob": self.dropout.retention_prob},
            "provider_ids": list(self.provider_ids),
            "params": [float(v) for v in self.params.to_flat()],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ModelArtifact":
        version = data.get("version")
        if version != ARTIFACT_VERSION:
            raise ArtifactError(f"unsupported artifact version {version!r} (expected {ARTIFACT_VERSION})")
        try:
            topo = NetworkTopology(tuple(data["topology"]["layer_sizes"]),
                                   tuple(data["topology"]["activations"]))
            fam = OutcomeFamily(data["family"]["kind"], data["family"]["sigma2_hat"])
            drop = data.get("dropout")
            ids = list(data["provider_ids"])
            params = NetworkParams.from_flat(topo, len(ids), np.array(data["params"], dtype=float))
        except (KeyError, TypeError) as exc:
            raise ArtifactError(f"malformed artifact: {exc}") from exc
        return cls(topo, params, ids, fam, None if drop is None else DropoutSpec(drop["retention_prob"]),
                   data.get("metadata", {}))

    @classmethod
    def from_json(cls, text: str) -> "ModelArtifact":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"artifact is not valid JSON: {exc}") from exc


def save_artifact(artifact: ModelArtifact, path) -> None:
    atomic_write_text(path, artifact.to_json())


def load_artifact(path) -> ModelArtifact:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror}") from exc
    return ModelArtifact.from_json(text)


def config_hash(config) -> str:
    fields = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    blob = json.dumps(fields, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
