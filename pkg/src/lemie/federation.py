"""
Simulated master/worker topology and the in-out-in protocol.

Features:
- Workers are asyncio tasks that own one data part each
- Every message is serialised to JSON at the channel boundary
- Three transfers per worker: samples in, pooled draws out, log-likelihoods in
- Optional extension round for draws generated at the master
- Deterministic transcripts (messages are committed in (phase, worker) order)
"""

import asyncio
import base64
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Annotated, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ContractViolation, ProtocolError
from .model import DrawSource, ModelSpec, ObservationBlock, ParamDraws, PartitionedData
from .rng import substream
from .samplers import sample_local_posterior
from .settings import RuntimeSettings

logger = logging.getLogger(__name__)

MASTER_ID = -1


# ---------------------------------------------------------------------------
# Wire schema
# ---------------------------------------------------------------------------


class MessageKind(str, Enum):
    SAMPLES_IN = "samples_in"
    POOLED_OUT = "pooled_out"
    LOGLIKS_IN = "logliks_in"


def _encode(a: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")


def _decode(text: str, dtype: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=dtype)


class DrawsPayload(BaseModel):
    """Parameter vectors only; little-endian float64, row-major."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["draws"] = "draws"
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    values: str
    origins: Optional[str] = None

    @classmethod
    def from_draws(cls, draws: ParamDraws) -> "DrawsPayload":
        return cls(
            rows=draws.N,
            cols=draws.p,
            values=_encode(draws.draws, "<f8"),
            origins=_encode(draws.component_codes(), "<i8"),
        )

    def matrix(self) -> np.ndarray:
        flat = _decode(self.values, "<f8")
        if flat.size != self.rows * self.cols:
            raise ProtocolError("draws payload size does not match its shape")
        return flat.reshape(self.rows, self.cols)

    def codes(self) -> Optional[np.ndarray]:
        return None if self.origins is None else _decode(self.origins, "<i8")


class LogLikPayload(BaseModel):
    """One log-likelihood value per received draw."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["logliks"] = "logliks"
    length: int = Field(ge=1)
    values: str

    @classmethod
    def from_values(cls, values: np.ndarray) -> "LogLikPayload":
        return cls(length=values.size, values=_encode(values, "<f8"))

    def vector(self) -> np.ndarray:
        v = _decode(self.values, "<f8")
        if v.size != self.length:
            raise ProtocolError("log-likelihood payload size does not match its length")
        return v


Payload = Annotated[Union[DrawsPayload, LogLikPayload], Field(discriminator="kind")]


class ProtocolMessage(BaseModel):
    """Envelope for one transfer. It has no field for observations."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: MessageKind
    origin: int
    destination: int
    stage: str = "main"
    sequence: int = 0
    byte_count: int = Field(ge=0)
    digest: str
    payload: Optional[Payload] = None

    @classmethod
    def wrap(
        cls,
        kind: MessageKind,
        origin: int,
        destination: int,
        payload: Payload,
        stage: str,
    ) -> "ProtocolMessage":
        body = payload.model_dump_json().encode("utf-8")
        return cls(
            kind=kind,
            origin=origin,
            destination=destination,
            stage=stage,
            byte_count=len(body),
            digest=hashlib.sha256(body).hexdigest(),
            payload=payload,
        )

    def to_wire(self) -> bytes:
        return self.model_dump_json().encode("utf-8")

    @classmethod
    def from_wire(cls, wire: bytes) -> "ProtocolMessage":
        return cls.model_validate_json(wire)

    def elided(self) -> "ProtocolMessage":
        return self.model_copy(update={"payload": None})


# ---------------------------------------------------------------------------
# Log-likelihood matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogLikMatrix:
    """``values[j, k]`` is the log-likelihood of part ``j`` at pooled draw ``k``."""

    values: np.ndarray
    column_source: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        source = np.array(self.column_source, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != source.size:
            raise ProtocolError(f"log-likelihood matrix {values.shape} vs {source.size} labels")
        if np.any(np.isnan(values)):
            raise ContractViolation("log-likelihood matrix contains NaN")
        values.setflags(write=False)
        source.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_source", source)

    @property
    def M(self) -> int:
        return int(self.values.shape[0])

    @property
    def N(self) -> int:
        return int(self.values.shape[1])

    def column_sums(self) -> np.ndarray:
        """Full-data log-likelihood at every pooled draw."""
        return self.values.sum(axis=0)

    def append_columns(self, other: "LogLikMatrix") -> "LogLikMatrix":
        if other.M != self.M:
            raise ProtocolError(f"cannot append {other.M} rows to {self.M}")
        return LogLikMatrix(
            np.hstack([self.values, other.values]),
            np.concatenate([self.column_source, other.column_source]),
        )


class ProtocolRound(NamedTuple):
    pooled: ParamDraws
    loglik: LogLikMatrix
    transcript: List[ProtocolMessage]

    @property
    def byte_count(self) -> int:
        return sum(m.byte_count for m in self.transcript)


# ---------------------------------------------------------------------------
# Worker and master
# ---------------------------------------------------------------------------


class Worker:
    """Holds one data part; only parameter vectors and log-likelihoods leave it."""

    def __init__(
        self,
        worker_id: int,
        block: ObservationBlock,
        model: ModelSpec,
        outbox: "asyncio.Queue[bytes]",
        limiter: asyncio.Semaphore,
        chunk_size: int,
    ):
        self.worker_id = worker_id
        self._block = block
        self._model = model
        self._outbox = outbox
        self._limiter = limiter
        self._chunk_size = chunk_size
        self.inbox: "asyncio.Queue[bytes]" = asyncio.Queue()

    async def draw_local(
        self, N: int, seed: int, purpose: str = "local_posterior", **sampler_options
    ) -> ParamDraws:
        rng = substream(seed, self.worker_id, purpose)
        async with self._limiter:
            return await asyncio.to_thread(
                sample_local_posterior,
                self._model,
                self._block,
                N,
                rng,
                self.worker_id,
                **sampler_options,
            )

    async def send_samples(self, draws: ParamDraws, stage: str) -> None:
        payload = DrawsPayload.from_draws(draws)
        message = ProtocolMessage.wrap(
            MessageKind.SAMPLES_IN, self.worker_id, MASTER_ID, payload, stage
        )
        await self._outbox.put(message.to_wire())

    async def step(self) -> None:
        """Answer one pooled_out message with this part's log-likelihoods."""
        message = ProtocolMessage.from_wire(await self.inbox.get())
        if message.kind is not MessageKind.POOLED_OUT or not isinstance(
            message.payload, DrawsPayload
        ):
            raise ProtocolError(f"worker {self.worker_id} got unexpected {message.kind.value}")
        thetas = message.payload.matrix()
        async with self._limiter:
            values = await asyncio.to_thread(self._log_likelihoods, thetas)
        reply = ProtocolMessage.wrap(
            MessageKind.LOGLIKS_IN,
            self.worker_id,
            MASTER_ID,
            LogLikPayload.from_values(values),
            message.stage,
        )
        await self._outbox.put(reply.to_wire())

    def _log_likelihoods(self, thetas: np.ndarray) -> np.ndarray:
        out = np.empty(thetas.shape[0])
        for start in range(0, thetas.shape[0], self._chunk_size):
            stop = start + self._chunk_size
            try:
                out[start:stop] = self._model.block_log_lik(self._block, thetas[start:stop])
            except ContractViolation as e:
                raise ContractViolation(f"worker {self.worker_id}: {e}") from e
        return out


class Federation:
    """
    Master node plus one simulated worker per data part.

    The master never sees observations. Use :meth:`connect` to get a session in
    which workers exist; the synchronous wrappers open one session per call.
    """

    def __init__(
        self,
        model: ModelSpec,
        parts: Union[PartitionedData, Sequence[ObservationBlock]],
        settings: Optional[RuntimeSettings] = None,
        chunk_size: Optional[int] = None,
        keep_payloads: bool = False,
    ):
        self.model = model
        self.parts = tuple(parts.parts if isinstance(parts, PartitionedData) else parts)
        if not self.parts:
            raise ProtocolError("a federation needs at least one worker")
        self.settings = settings or RuntimeSettings()
        self.chunk_size = chunk_size or self.settings.chunk_size
        self.keep_payloads = keep_payloads
        self.transcript: List[ProtocolMessage] = []
        self._workers: List[Worker] = []
        self._outbox: Optional["asyncio.Queue[bytes]"] = None

    @property
    def M(self) -> int:
        return len(self.parts)

    # -- session -----------------------------------------------------------

    async def __aenter__(self) -> "Federation":
        self._outbox = asyncio.Queue()
        limiter = asyncio.Semaphore(self.settings.workers)
        self._workers = [
            Worker(j, part, self.model, self._outbox, limiter, self.chunk_size)
            for j, part in enumerate(self.parts)
        ]
        logger.debug(f"🔌 Started {self.M} workers")
        return self

    async def __aexit__(self, *exc) -> None:
        self._workers = []
        self._outbox = None

    def _require_session(self) -> "asyncio.Queue[bytes]":
        if self._outbox is None:
            raise ProtocolError("federation used outside an 'async with' session")
        return self._outbox

    async def _collect(self, kind: MessageKind, stage: str) -> List[ProtocolMessage]:
        outbox = self._require_session()
        received = [ProtocolMessage.from_wire(await outbox.get()) for _ in range(self.M)]
        if any(m.kind is not kind or m.stage != stage for m in received):
            raise ProtocolError(f"expected {self.M} {kind.value} messages in {stage} stage")
        received.sort(key=lambda m: m.origin)
        if [m.origin for m in received] != list(range(self.M)):
            raise ProtocolError("missing or duplicated worker replies")
        return received

    def _commit(self, messages: Sequence[ProtocolMessage], sink: List[ProtocolMessage]) -> None:
        for message in messages:
            stamped = message.model_copy(update={"sequence": len(self.transcript)})
            kept = stamped if self.keep_payloads else stamped.elided()
            self.transcript.append(kept)
            sink.append(kept)

    async def _broadcast_and_gather(
        self, draws: ParamDraws, stage: str, sink: List[ProtocolMessage]
    ) -> LogLikMatrix:
        payload = DrawsPayload.from_draws(draws)
        outgoing = [
            ProtocolMessage.wrap(MessageKind.POOLED_OUT, MASTER_ID, w.worker_id, payload, stage)
            for w in self._workers
        ]
        self._commit(outgoing, sink)
        for worker, message in zip(self._workers, outgoing):
            await worker.inbox.put(message.to_wire())
        logger.info(f"📡 Sent {draws.N} draws to {self.M} workers ({stage} stage)")

        await asyncio.gather(*(w.step() for w in self._workers))
        replies = await self._collect(MessageKind.LOGLIKS_IN, stage)
        rows = []
        for message in replies:
            assert isinstance(message.payload, LogLikPayload)
            values = message.payload.vector()
            if values.size != draws.N:
                raise ProtocolError(f"worker {message.origin} returned {values.size} values")
            if np.any(np.isnan(values)):
                raise ContractViolation(f"worker {message.origin} returned NaN log-likelihoods")
            rows.append(values)
        self._commit(replies, sink)
        return LogLikMatrix(np.vstack(rows), draws.component_codes())

    # -- protocol ----------------------------------------------------------

    async def draw_local_posteriors(
        self, N: int, seed: int, purpose: str = "local_posterior", **sampler_options
    ) -> List[ParamDraws]:
        """Each worker samples its own local posterior on its own RNG substream."""
        self._require_session()
        return list(
            await asyncio.gather(
                *(w.draw_local(N, seed, purpose, **sampler_options) for w in self._workers)
            )
        )

    async def in_out_in(self, local_draws: Sequence[ParamDraws]) -> ProtocolRound:
        """Run the three-transfer protocol over the workers' local draws."""
        outbox = self._require_session()
        if len(local_draws) != self.M:
            raise ProtocolError(f"{len(local_draws)} draw sets for {self.M} workers")
        for j, draws in enumerate(local_draws):
            if draws.p != self.model.parameter_dim:
                raise ProtocolError(
                    f"worker {j} sent dimension {draws.p}, model has {self.model.parameter_dim}"
                )
        messages: List[ProtocolMessage] = []

        # 1. samples in
        await asyncio.gather(*(w.send_samples(d, "main") for w, d in zip(self._workers, local_draws)))
        arrivals = await self._collect(MessageKind.SAMPLES_IN, "main")
        self._commit(arrivals, messages)
        received = []
        for message in arrivals:
            assert isinstance(message.payload, DrawsPayload)
            received.append(
                ParamDraws(
                    message.payload.matrix(),
                    DrawSource.local(message.origin),
                    origins=message.payload.codes(),
                )
            )
        if outbox.qsize():
            raise ProtocolError("unexpected extra messages after samples_in")
        pooled = ParamDraws.pool(received)

        # 2. pooled out, 3. log-likelihoods in
        loglik = await self._broadcast_and_gather(pooled, "main", messages)
        logger.info(
            f"✅ In-out-in complete: M={self.M}, N={pooled.N}, "
            f"{len(messages)} messages, {sum(m.byte_count for m in messages)} bytes"
        )
        return ProtocolRound(pooled, loglik, messages)

    async def extension_round(
        self, pooled: ParamDraws, loglik: LogLikMatrix, extra: Sequence[ParamDraws]
    ) -> ProtocolRound:
        """Evaluate master-generated draws (e.g. Laplace draws) on every part."""
        self._require_session()
        extra = [e for e in extra if e.N > 0]
        if not extra:
            return ProtocolRound(pooled, loglik, [])
        if any(e.p != pooled.p for e in extra):
            raise ProtocolError("extra draws do not match the pooled dimension")
        batch = ParamDraws.pool(extra)
        messages: List[ProtocolMessage] = []
        new_columns = await self._broadcast_and_gather(batch, "extension", messages)
        return ProtocolRound(
            ParamDraws.pool([pooled, batch]), loglik.append_columns(new_columns), messages
        )

    # -- synchronous wrappers -------------------------------------------------

    def run_in_out_in(self, local_draws: Sequence[ParamDraws]) -> ProtocolRound:
        async def _run() -> ProtocolRound:
            async with self:
                return await self.in_out_in(local_draws)

        return asyncio.run(_run())

    def extend_with_proposal_draws(
        self, pooled: ParamDraws, loglik: LogLikMatrix, extra: Sequence[ParamDraws]
    ) -> ProtocolRound:
        async def _run() -> ProtocolRound:
            async with self:
                return await self.extension_round(pooled, loglik, extra)

        return asyncio.run(_run())


def run_in_out_in(
    workers: Sequence[Tuple[ObservationBlock, ParamDraws]],
    model: ModelSpec,
    **options,
) -> ProtocolRound:
    """Pool the workers' draws and gather the M x N log-likelihood matrix."""
    federation = Federation(model, [part for part, _ in workers], **options)
    return federation.run_in_out_in([draws for _, draws in workers])


def extend_with_proposal_draws(
    pooled: ParamDraws,
    loglik: LogLikMatrix,
    extra: Sequence[ParamDraws],
    model: ModelSpec,
    parts: Union[PartitionedData, Sequence[ObservationBlock]],
    **options,
) -> ProtocolRound:
    """Append ``extra`` draws and their per-part log-likelihood columns."""
    return Federation(model, parts, **options).extend_with_proposal_draws(pooled, loglik, extra)


def transcript_jsonl(messages: Sequence[ProtocolMessage]) -> str:
    """One envelope per line with payloads elided to their digests."""
    return "".join(m.model_dump_json(exclude={"payload"}) + "\n" for m in messages)
