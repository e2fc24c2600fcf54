"""
CSV and JSON persistence for draws, weights and run artefacts.

Tabular data goes to CSV with a header row; metadata goes to a JSON sidecar
next to it (``<name>.json``) validated by a pydantic model.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import InvalidArgument
from .federation import ProtocolMessage, transcript_jsonl
from .laplace import LaplaceApprox
from .mie import Scheme, WeightedSampleSet
from .model import DrawSource, ObservationBlock, ParamDraws, PartitionedData, SourceKind, component_label

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DrawSetSidecar(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model: str = ""
    part_id: Optional[int] = None
    N: int
    seed: Optional[int] = None
    burnin: Optional[int] = None
    source: str


class WeightsSidecar(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scheme: str
    q: Dict[str, float] = {}
    log_chat: Dict[str, float] = {}
    components: List[str] = []


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _theta_header(p: int) -> List[str]:
    return [f"theta_{k}" for k in range(p)]


def _row_labels(draws: ParamDraws) -> List[str]:
    if draws.origins is None:
        return [draws.source.label] * draws.N
    return [component_label(int(c)) for c in draws.origins]


def _codes_from_labels(labels: Sequence[str]) -> Optional[np.ndarray]:
    sources = [DrawSource.parse(label) for label in labels]
    codes = [s.component for s in sources]
    if any(c is None for c in codes):
        return None
    return np.array(codes, dtype=np.int64)


def _write_rows(path: PathLike, header: Sequence[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _read_rows(path: PathLike):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def write_draws(path: PathLike, draws: ParamDraws, **sidecar) -> None:
    """Write ``theta_*,source`` rows plus a :class:`DrawSetSidecar`."""
    labels = _row_labels(draws)
    rows = ([repr(float(v)) for v in row] + [lab] for row, lab in zip(draws.draws, labels))
    _write_rows(path, _theta_header(draws.p) + ["source"], rows)
    meta = DrawSetSidecar(N=draws.N, source=draws.source.label, **sidecar)
    sidecar_path(path).write_text(meta.model_dump_json(indent=2))
    logger.debug(f"Wrote {draws.N} draws to {path}")


def read_draws(path: PathLike) -> ParamDraws:
    header, rows = _read_rows(path)
    p = sum(1 for h in header if h.startswith("theta_"))
    values = np.array([[float(v) for v in r[:p]] for r in rows])
    labels = [r[p] for r in rows]
    meta_file = sidecar_path(path)
    source_label = labels[0] if labels else "pooled"
    if meta_file.exists():
        source_label = DrawSetSidecar.model_validate_json(meta_file.read_text()).source
    source = DrawSource.parse(source_label)
    origins = _codes_from_labels(labels) if source.kind is SourceKind.POOLED else None
    return ParamDraws(values, source, origins=origins)


def write_weighted(path: PathLike, ws: WeightedSampleSet) -> None:
    """Write ``theta_*,log_weight,norm_weight,source`` rows plus a :class:`WeightsSidecar`."""
    labels = _row_labels(ws.draws) if ws.codes is None else [component_label(int(c)) for c in ws.codes]
    rows = (
        [repr(float(v)) for v in row] + [repr(float(lw)), repr(float(nw)), lab]
        for row, lw, nw, lab in zip(ws.draws.draws, ws.log_weights, ws.norm_weights, labels)
    )
    _write_rows(path, _theta_header(ws.draws.p) + ["log_weight", "norm_weight", "source"], rows)
    meta = WeightsSidecar(
        scheme=ws.scheme.value,
        q={component_label(c): v for c, v in ws.component_weights.items()},
        log_chat={component_label(c): v for c, v in ws.chat.items()},
        components=[component_label(c) for c in ws.component_weights],
    )
    sidecar_path(path).write_text(meta.model_dump_json(indent=2))


def read_weighted(path: PathLike) -> WeightedSampleSet:
    header, rows = _read_rows(path)
    if not rows:
        raise InvalidArgument(f"{path} holds no weighted draws")
    try:
        i_lw, i_nw, i_src = (header.index(c) for c in ("log_weight", "norm_weight", "source"))
    except ValueError as e:
        raise InvalidArgument(f"{path} is not a weighted-sample file") from e
    p = sum(1 for h in header if h.startswith("theta_"))
    values = np.array([[float(v) for v in r[:p]] for r in rows])
    log_w = np.array([float(r[i_lw]) for r in rows])
    norm_w = np.array([float(r[i_nw]) for r in rows])
    codes = _codes_from_labels([r[i_src] for r in rows])
    scheme = Scheme.MIE2
    q: Dict[int, float] = {}
    chat: Dict[int, float] = {}
    meta_file = sidecar_path(path)
    if meta_file.exists():
        meta = WeightsSidecar.model_validate_json(meta_file.read_text())
        scheme = Scheme(meta.scheme)
        q = {DrawSource.parse(k).component: v for k, v in meta.q.items()}  # type: ignore[misc]
        chat = {DrawSource.parse(k).component: v for k, v in meta.log_chat.items()}  # type: ignore[misc]
    draws = ParamDraws(values, DrawSource(SourceKind.POOLED), origins=codes)
    return WeightedSampleSet(draws, log_w, norm_w / norm_w.sum(), scheme, q, chat, codes)


def write_laplace(path: PathLike, approx: LaplaceApprox) -> None:
    Path(path).write_text(approx.to_json())


def read_laplace(path: PathLike) -> LaplaceApprox:
    return LaplaceApprox.from_json(Path(path).read_text())


def write_partition_manifest(path: PathLike, data: PartitionedData) -> None:
    Path(path).write_text(json.dumps(data.manifest()))


def write_observations(path: PathLike, block: ObservationBlock) -> None:
    _write_rows(path, block.columns, ([repr(float(v)) for v in row] for row in block.values))


def read_observations(path: PathLike) -> ObservationBlock:
    header, rows = _read_rows(path)
    return ObservationBlock(tuple(header), np.array([[float(v) for v in r] for r in rows]))


def write_transcript(path: PathLike, messages: Sequence[ProtocolMessage]) -> None:
    Path(path).write_text(transcript_jsonl(messages))


def write_columns(path: PathLike, header: Sequence[str], columns: Sequence[Sequence]) -> None:
    """Whitespace-separated plot data with a ``#`` header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in zip(*columns):
            fh.write(" ".join(v if isinstance(v, str) else repr(float(v)) for v in row) + "\n")
