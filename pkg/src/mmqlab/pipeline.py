"""Deterministic toy multimodal pipeline with addressable linear layers.

Three components run in sequence: a vision tower over patch tokens, a
connector (either learned-query cross-attention or a bare linear projector),
and a causal language decoder conditioned on the connector output as a soft
prefix. Every attention/feed-forward weight matrix is addressable by
(component, block group, layer type) and can be swapped for its dequantized
quantization (simulated quantization: the replaced weights stay float32
inside the full-precision graph).

Block layout is uniform everywhere: four attention projections plus two
feed-forward matrices per block, pre-norm residual wiring. Embeddings, layer
norms, learned queries and the output head are never quantized.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable

import numpy as np

from .numerics import RngStream, derive_seed, randn_matrix
from .quantizers import (
    CalibrationSet,
    GridScheme,
    Method,
    QuantizedMatrix,
    dequantize,
    awq_quantize,
    gptq_quantize,
    proxy_loss,
    rtn_group_quantize,
    uniform_quantize,
)

if TYPE_CHECKING:
    from .tasks import ProbePair, ProbeSet

NUM_QUERIES = 8
MAX_SEQ = 64
BOS_ID = 0
INIT_STD = 0.02
LN_EPS = 1e-5
CALIBRATION_ROW_CAP = 2048
CAPTION_HORIZON = 16
VQA_HORIZON = 4

WEIGHTS_MAGIC = b"MMQW"
WEIGHTS_VERSION = 1


class ComponentId(enum.Enum):
    VISION = "vision"
    CONNECTOR = "connector"
    LANGUAGE = "language"


class BlockGroup(enum.Enum):
    FRONT = "front"
    MIDDLE = "middle"
    END = "end"


class LayerType(enum.Enum):
    ATTN = "attn"
    FF = "ff"


class TaskKind(enum.Enum):
    RETRIEVAL = "retrieval"
    CAPTION = "caption"
    VQA = "vqa"


class ConnectorKind(enum.Enum):
    QUERY_CROSS_ATTENTION = "query_cross_attention"
    LINEAR_PROJECTOR = "linear_projector"


ATTN_SUBLAYERS = ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.out_proj")
FF_SUBLAYERS = ("ff.up", "ff.down")

COMPONENT_ORDER = (ComponentId.VISION, ComponentId.CONNECTOR, ComponentId.LANGUAGE)
GROUP_ORDER = (BlockGroup.FRONT, BlockGroup.MIDDLE, BlockGroup.END)
LAYER_TYPE_ORDER = (LayerType.ATTN, LayerType.FF)


@dataclass(frozen=True)
class PipelineSpec:
    """Architecture hyperparameters; block counts keep front/middle/end thirds exact."""

    d_model: int = 64
    vision_blocks: int = 6
    connector_blocks: int = 3
    language_blocks: int = 6
    heads: int = 4
    ffn_mult: int = 4
    patch_count: int = 16
    vocab: int = 256
    connector_kind: ConnectorKind = ConnectorKind.QUERY_CROSS_ATTENTION
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        for label, blocks in (("vision_blocks", self.vision_blocks), ("language_blocks", self.language_blocks)):
            if blocks < 3 or blocks % 3 != 0:
                raise ValueError(f"{label} must be a positive multiple of 3, got {blocks}")
        if self.connector_kind is ConnectorKind.QUERY_CROSS_ATTENTION:
            if self.connector_blocks < 3 or self.connector_blocks % 3 != 0:
                raise ValueError(
                    f"connector_blocks must be a positive multiple of 3, got {self.connector_blocks}"
                )
        elif self.connector_blocks != 0:
            raise ValueError("a linear projector connector has no blocks; set connector_blocks=0")
        if self.patch_count < 1 or self.vocab < 2 or self.ffn_mult < 1:
            raise ValueError("patch_count >= 1, vocab >= 2 and ffn_mult >= 1 required")

    def blocks_of(self, component: ComponentId) -> int:
        return {
            ComponentId.VISION: self.vision_blocks,
            ComponentId.CONNECTOR: self.connector_blocks,
            ComponentId.LANGUAGE: self.language_blocks,
        }[component]

    def active_components(self) -> tuple[ComponentId, ...]:
        """Components that own addressable layers."""
        return tuple(c for c in COMPONENT_ORDER if self.blocks_of(c) > 0)


def group_of(block_index: int, n_blocks: int) -> BlockGroup:
    third = n_blocks // 3
    if block_index < third:
        return BlockGroup.FRONT
    if block_index < 2 * third:
        return BlockGroup.MIDDLE
    return BlockGroup.END


@dataclass(frozen=True)
class LayerAddress:
    """Names one weight matrix: component, block, group third, layer type, sublayer."""

    component: ComponentId
    block_index: int
    group: BlockGroup
    layer_type: LayerType
    sublayer: str

    @property
    def name(self) -> str:
        return f"{self.component.value}.block{self.block_index}.{self.sublayer}"


@dataclass(frozen=True)
class Selector:
    """Subset selection over the three addressing axes; empty sets select nothing."""

    components: frozenset[ComponentId]
    groups: frozenset[BlockGroup]
    layer_types: frozenset[LayerType]

    @classmethod
    def make(
        cls,
        components: Iterable[ComponentId] = COMPONENT_ORDER,
        groups: Iterable[BlockGroup] = GROUP_ORDER,
        layer_types: Iterable[LayerType] = LAYER_TYPE_ORDER,
    ) -> "Selector":
        return cls(frozenset(components), frozenset(groups), frozenset(layer_types))

    @classmethod
    def everything(cls) -> "Selector":
        return cls.make()

    def matches(self, addr: LayerAddress) -> bool:
        return (
            addr.component in self.components
            and addr.group in self.groups
            and addr.layer_type in self.layer_types
        )


@dataclass
class ModelWeights:
    """All model parameters: addressable linear layers plus fixed extras."""

    spec: PipelineSpec
    layers: dict[str, np.ndarray]
    extras: dict[str, np.ndarray]
    addresses: tuple[LayerAddress, ...]

    @property
    def param_count(self) -> int:
        return sum(int(a.size) for a in self.layers.values()) + sum(
            int(a.size) for a in self.extras.values()
        )

    @property
    def quantizable_param_count(self) -> int:
        return sum(int(a.size) for a in self.layers.values())


@dataclass(frozen=True)
class LedgerEntry:
    """One quantized layer, with the storage convention used for bpw accounting."""

    layer: str
    method: Method
    bits: int
    group_size: int
    scheme: GridScheme
    proxy_error: float
    code_bits: int


@dataclass
class QuantizationLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    @property
    def layer_names(self) -> list[str]:
        return [e.layer for e in self.entries]


def _sublayer_shapes(spec: PipelineSpec) -> dict[str, tuple[int, int]]:
    d = spec.d_model
    f = spec.ffn_mult * d
    return {
        "attn.q_proj": (d, d),
        "attn.k_proj": (d, d),
        "attn.v_proj": (d, d),
        "attn.out_proj": (d, d),
        "ff.up": (f, d),
        "ff.down": (d, f),
    }


def _enumerate_addresses(spec: PipelineSpec) -> tuple[LayerAddress, ...]:
    addresses = []
    for component in COMPONENT_ORDER:
        n_blocks = spec.blocks_of(component)
        for block in range(n_blocks):
            group = group_of(block, n_blocks)
            for sublayer in ATTN_SUBLAYERS:
                addresses.append(LayerAddress(component, block, group, LayerType.ATTN, sublayer))
            for sublayer in FF_SUBLAYERS:
                addresses.append(LayerAddress(component, block, group, LayerType.FF, sublayer))
    return tuple(addresses)


def _extra_shapes(spec: PipelineSpec) -> dict[str, tuple[int, ...]]:
    d = spec.d_model
    shapes: dict[str, tuple[int, ...]] = {"vision.patch_embed": (d, d)}
    for component in COMPONENT_ORDER:
        for block in range(spec.blocks_of(component)):
            for norm in ("norm1", "norm2"):
                shapes[f"{component.value}.block{block}.{norm}.scale"] = (d,)
                shapes[f"{component.value}.block{block}.{norm}.bias"] = (d,)
    shapes["vision.final_norm.scale"] = (d,)
    shapes["vision.final_norm.bias"] = (d,)
    if spec.connector_kind is ConnectorKind.QUERY_CROSS_ATTENTION:
        shapes["connector.queries"] = (NUM_QUERIES, d)
        shapes["connector.final_norm.scale"] = (d,)
        shapes["connector.final_norm.bias"] = (d,)
    else:
        shapes["connector.proj"] = (d, d)
    shapes["language.token_embedding"] = (spec.vocab, d)
    shapes["language.pos_embedding"] = (MAX_SEQ, d)
    shapes["language.final_norm.scale"] = (d,)
    shapes["language.final_norm.bias"] = (d,)
    shapes["language.output_head"] = (spec.vocab, d)
    return shapes


def build_model(spec: PipelineSpec) -> ModelWeights:
    """Deterministic init from spec.seed; every tensor gets its own name-keyed stream."""
    addresses = _enumerate_addresses(spec)
    shapes = _sublayer_shapes(spec)
    layers: dict[str, np.ndarray] = {}
    for addr in addresses:
        stream = RngStream(derive_seed(spec.seed, "weights", addr.name))
        w = randn_matrix(stream, *shapes[addr.sublayer], std=INIT_STD)
        if addr.sublayer in ("attn.out_proj", "ff.down"):
            # residual-path projections shrink with depth to keep activations O(1)
            w = (w / math.sqrt(2.0 * spec.blocks_of(addr.component))).astype(np.float32)
        layers[addr.name] = w

    extras: dict[str, np.ndarray] = {}
    for name, shape in _extra_shapes(spec).items():
        if name.endswith(".scale"):
            extras[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            extras[name] = np.zeros(shape, dtype=np.float32)
        else:
            stream = RngStream(derive_seed(spec.seed, "weights", name))
            rows = shape[0] if len(shape) == 2 else 1
            cols = shape[-1]
            extras[name] = randn_matrix(stream, rows, cols, std=INIT_STD).reshape(shape)
    return ModelWeights(spec=spec, layers=layers, extras=extras, addresses=addresses)


def enumerate_layers(weights: ModelWeights, sel: Selector) -> list[LayerAddress]:
    """Addresses matching the selector, in stable component/block/sublayer order."""
    return [addr for addr in weights.addresses if sel.matches(addr)]


# --- forward pass -----------------------------------------------------------

Recorder = Callable[[str, np.ndarray], None]


def _layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + np.float32(LN_EPS)) * scale + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _record(recorder: Recorder | None, name: str, x: np.ndarray):
    if recorder is not None:
        recorder(name, x.reshape(-1, x.shape[-1]))


def _attention(
    weights: ModelWeights,
    base: str,
    x_q: np.ndarray,
    x_kv: np.ndarray,
    causal: bool,
    recorder: Recorder | None,
) -> np.ndarray:
    spec = weights.spec
    heads, d = spec.heads, spec.d_model
    head_dim = d // heads
    _record(recorder, f"{base}.attn.q_proj", x_q)
    _record(recorder, f"{base}.attn.k_proj", x_kv)
    _record(recorder, f"{base}.attn.v_proj", x_kv)
    q = x_q @ weights.layers[f"{base}.attn.q_proj"].T
    k = x_kv @ weights.layers[f"{base}.attn.k_proj"].T
    v = x_kv @ weights.layers[f"{base}.attn.v_proj"].T

    b, sq, _ = q.shape
    sk = k.shape[1]
    q = q.reshape(b, sq, heads, head_dim).transpose(0, 2, 1, 3)
    k = k.reshape(b, sk, heads, head_dim).transpose(0, 2, 1, 3)
    v = v.reshape(b, sk, heads, head_dim).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.float32(math.sqrt(head_dim))
    if causal:
        mask = np.triu(np.full((sq, sk), np.float32(-1e9)), k=1)
        scores = scores + mask
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, sq, d)
    _record(recorder, f"{base}.attn.out_proj", ctx)
    return ctx @ weights.layers[f"{base}.attn.out_proj"].T


def _feed_forward(weights: ModelWeights, base: str, x: np.ndarray, recorder: Recorder | None) -> np.ndarray:
    _record(recorder, f"{base}.ff.up", x)
    hidden = _gelu(x @ weights.layers[f"{base}.ff.up"].T)
    _record(recorder, f"{base}.ff.down", hidden)
    return hidden @ weights.layers[f"{base}.ff.down"].T


def _block(
    weights: ModelWeights,
    base: str,
    x: np.ndarray,
    kv: np.ndarray | None,
    causal: bool,
    recorder: Recorder | None,
) -> np.ndarray:
    extras = weights.extras
    normed = _layer_norm(x, extras[f"{base}.norm1.scale"], extras[f"{base}.norm1.bias"])
    x = x + _attention(weights, base, normed, normed if kv is None else kv, causal, recorder)
    normed = _layer_norm(x, extras[f"{base}.norm2.scale"], extras[f"{base}.norm2.bias"])
    return x + _feed_forward(weights, base, normed, recorder)


def encode_vision(weights: ModelWeights, images: np.ndarray, recorder: Recorder | None = None) -> np.ndarray:
    """Vision tower over patch tokens: (batch, patch_count, d_model) in and out."""
    spec = weights.spec
    if images.ndim != 3 or images.shape[1] != spec.patch_count or images.shape[2] != spec.d_model:
        raise ValueError(
            f"image batch shape {images.shape} does not match "
            f"(*, {spec.patch_count}, {spec.d_model})"
        )
    x = images.astype(np.float32) @ weights.extras["vision.patch_embed"].T
    for i in range(spec.vision_blocks):
        x = _block(weights, f"vision.block{i}", x, kv=None, causal=False, recorder=recorder)
    return _layer_norm(x, weights.extras["vision.final_norm.scale"], weights.extras["vision.final_norm.bias"])


def run_connector(weights: ModelWeights, vision_out: np.ndarray, recorder: Recorder | None = None) -> np.ndarray:
    """Connector output tokens: learned queries cross-attending, or a projection."""
    spec = weights.spec
    if spec.connector_kind is ConnectorKind.LINEAR_PROJECTOR:
        return vision_out @ weights.extras["connector.proj"].T
    x = np.broadcast_to(
        weights.extras["connector.queries"], (vision_out.shape[0], NUM_QUERIES, spec.d_model)
    ).astype(np.float32)
    for i in range(spec.connector_blocks):
        x = _block(weights, f"connector.block{i}", x, kv=vision_out, causal=False, recorder=recorder)
    return _layer_norm(
        x, weights.extras["connector.final_norm.scale"], weights.extras["connector.final_norm.bias"]
    )


def decode_hidden(
    weights: ModelWeights,
    prefix: np.ndarray,
    token_ids: np.ndarray,
    recorder: Recorder | None = None,
) -> np.ndarray:
    """Causal decoder over [prefix tokens, embedded token ids]; returns final hidden states."""
    spec = weights.spec
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ValueError(f"token ids must be (batch, length), got shape {token_ids.shape}")
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= spec.vocab):
        raise ValueError("token id out of vocabulary range")
    tok = weights.extras["language.token_embedding"][token_ids]
    x = np.concatenate([prefix.astype(np.float32), tok], axis=1)
    seq = x.shape[1]
    if seq > MAX_SEQ:
        raise ValueError(f"sequence length {seq} exceeds maximum {MAX_SEQ}")
    x = x + weights.extras["language.pos_embedding"][:seq]
    for i in range(spec.language_blocks):
        x = _block(weights, f"language.block{i}", x, kv=None, causal=True, recorder=recorder)
    return _layer_norm(
        x, weights.extras["language.final_norm.scale"], weights.extras["language.final_norm.bias"]
    )


def _empty_prefix(batch: int, d_model: int) -> np.ndarray:
    return np.zeros((batch, 0, d_model), dtype=np.float32)


def greedy_generate(
    weights: ModelWeights, prefix: np.ndarray, prompt_ids: np.ndarray, horizon: int
) -> np.ndarray:
    """Greedy decode `horizon` tokens; argmax breaks ties toward the lower id."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    ids = np.asarray(prompt_ids, dtype=np.int64)
    head = weights.extras["language.output_head"]
    generated = np.empty((ids.shape[0], horizon), dtype=np.int64)
    for step in range(horizon):
        hidden = decode_hidden(weights, prefix, ids)
        logits = hidden[:, -1, :] @ head.T
        nxt = np.argmax(logits, axis=-1)
        generated[:, step] = nxt
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return generated


def image_embeddings(weights: ModelWeights, images: np.ndarray) -> np.ndarray:
    """Unit-norm pooled connector output, one row per image."""
    pooled = run_connector(weights, encode_vision(weights, images)).mean(axis=1)
    return pooled / np.linalg.norm(pooled, axis=-1, keepdims=True)


def text_embeddings(weights: ModelWeights, text_ids: np.ndarray) -> np.ndarray:
    """Unit-norm mean-pooled decoder hidden states over [BOS, text]."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    bos = np.full((text_ids.shape[0], 1), BOS_ID, dtype=np.int64)
    prompt = np.concatenate([bos, text_ids], axis=1)
    hidden = decode_hidden(weights, _empty_prefix(text_ids.shape[0], weights.spec.d_model), prompt)
    pooled = hidden.mean(axis=1)
    return pooled / np.linalg.norm(pooled, axis=-1, keepdims=True)


def generation_prompt(probe_text: np.ndarray, mode: TaskKind) -> np.ndarray:
    bos = np.full((probe_text.shape[0], 1), BOS_ID, dtype=np.int64)
    if mode is TaskKind.CAPTION:
        return bos
    return np.concatenate([bos, np.asarray(probe_text, dtype=np.int64)], axis=1)


def generate_tokens(
    weights: ModelWeights,
    images: np.ndarray,
    mode: TaskKind,
    horizon: int,
    question_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Batched conditional generation for caption (image only) or VQA (image + question)."""
    prefix = run_connector(weights, encode_vision(weights, images))
    if mode is TaskKind.CAPTION:
        prompt = generation_prompt(np.empty((images.shape[0], 0)), TaskKind.CAPTION)
    elif mode is TaskKind.VQA:
        if question_ids is None:
            raise ValueError("VQA generation requires question ids")
        prompt = generation_prompt(question_ids, TaskKind.VQA)
    else:
        raise ValueError(f"not a generation task: {mode}")
    return greedy_generate(weights, prefix, prompt, horizon)


@dataclass
class RetrievalOutput:
    image_embedding: np.ndarray
    text_embedding: np.ndarray


def forward(
    weights: ModelWeights, probe: "ProbePair", mode: TaskKind, horizon: int | None = None
) -> RetrievalOutput | np.ndarray:
    """Single-probe forward: embeddings for retrieval, generated ids otherwise."""
    images = probe.image_like[None, :, :]
    if mode is TaskKind.RETRIEVAL:
        return RetrievalOutput(
            image_embedding=image_embeddings(weights, images)[0],
            text_embedding=text_embeddings(weights, probe.text_ids[None, :])[0],
        )
    if mode is TaskKind.CAPTION:
        return generate_tokens(weights, images, mode, horizon or CAPTION_HORIZON)[0]
    return generate_tokens(
        weights, images, mode, horizon or VQA_HORIZON, question_ids=probe.question_ids[None, :]
    )[0]


# --- calibration ------------------------------------------------------------


def collect_calibration(weights: ModelWeights, probes: "ProbeSet", n: int = 128) -> CalibrationSet:
    """Record every addressable layer's input activations on n probe pairs.

    One teacher-forced caption-style pass (image prefix + BOS + text) covers
    all three components; per-layer rows are deterministically subsampled to
    at most CALIBRATION_ROW_CAP.
    """
    if len(probes.pairs) < n:
        raise ValueError(f"need at least {n} probe pairs for calibration, have {len(probes.pairs)}")
    recorded: dict[str, np.ndarray] = {}

    def recorder(name: str, x: np.ndarray):
        recorded[name] = x

    images = probes.images[:n]
    text = probes.texts[:n]
    vision_out = encode_vision(weights, images, recorder=recorder)
    prefix = run_connector(weights, vision_out, recorder=recorder)
    bos = np.full((n, 1), BOS_ID, dtype=np.int64)
    decode_hidden(weights, prefix, np.concatenate([bos, text], axis=1), recorder=recorder)

    layers: dict[str, np.ndarray] = {}
    for addr in weights.addresses:
        x = recorded[addr.name]
        if x.shape[0] > CALIBRATION_ROW_CAP:
            stream = RngStream(derive_seed(weights.spec.seed, "calibration", addr.name))
            x = x[stream.choice(x.shape[0], CALIBRATION_ROW_CAP)]
        layers[addr.name] = np.ascontiguousarray(x, dtype=np.float32)
    return CalibrationSet(layers=layers, sample_count=n)


# --- quantization -----------------------------------------------------------


def apply_quantization(
    weights: ModelWeights,
    sel: Selector,
    method: Method,
    k: int,
    calib: CalibrationSet | None = None,
    group_size: int = 128,
) -> tuple[ModelWeights, QuantizationLedger]:
    """Replace selected layers with their dequantized quantization.

    Returns a new ModelWeights sharing unselected tensors, plus a ledger with
    per-layer storage accounting. GPTQ/AWQ require calibration covering every
    selected layer; the proxy error for Uniform/RTN is only filled in when
    calibration is available.
    """
    new_layers = dict(weights.layers)
    ledger = QuantizationLedger()
    for addr in enumerate_layers(weights, sel):
        name = addr.name
        w = weights.layers[name]
        x = calib.layers.get(name) if calib is not None else None
        if method in (Method.GPTQ, Method.AWQ) and x is None:
            raise ValueError(f"missing calibration activations for layer {name}")
        if method is Method.UNIFORM:
            qm = uniform_quantize(w, k)
            proxy = proxy_loss(w, dequantize(qm), x) if x is not None else float("nan")
        elif method is Method.RTN:
            qm = rtn_group_quantize(w, k, group_size)
            proxy = proxy_loss(w, dequantize(qm), x) if x is not None else float("nan")
        elif method is Method.GPTQ:
            qm, proxy = gptq_quantize(w, x, k, group_size=group_size)
        else:
            qm, _, proxy = awq_quantize(w, x, k, group_size=group_size)
        new_layers[name] = dequantize(qm)
        numel = w.size
        ledger.entries.append(
            LedgerEntry(
                layer=name,
                method=method,
                bits=k,
                group_size=numel if method is Method.UNIFORM else group_size,
                scheme=GridScheme.PER_TENSOR
                if (method is Method.UNIFORM or group_size >= numel)
                else GridScheme.PER_GROUP,
                proxy_error=proxy,
                code_bits=k * numel,
            )
        )
    quantized = ModelWeights(
        spec=weights.spec, layers=new_layers, extras=weights.extras, addresses=weights.addresses
    )
    return quantized, ledger


# --- weight container -------------------------------------------------------


def save_weights(weights: ModelWeights, path) -> None:
    """Flat binary container: MMQW magic, version, then named float32 tensors."""
    names = sorted(list(weights.layers) + list(weights.extras))
    lookup = {**weights.layers, **weights.extras}
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(lookup[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_weights(path, spec: PipelineSpec) -> ModelWeights:
    """Read a MMQW container back into ModelWeights, validating names and shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported container version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if dtype_code != 0:
            raise ValueError(f"unsupported dtype code {dtype_code} for {name}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)

    addresses = _enumerate_addresses(spec)
    expected_layers = {a.name: _sublayer_shapes(spec)[a.sublayer] for a in addresses}
    expected_extras = _extra_shapes(spec)
    expected = set(expected_layers) | set(expected_extras)
    if set(tensors) != expected:
        missing = expected - set(tensors)
        surplus = set(tensors) - expected
        raise ValueError(f"container does not match spec (missing={sorted(missing)[:3]}, surplus={sorted(surplus)[:3]})")
    for name, shape in {**expected_layers, **expected_extras}.items():
        if tensors[name].shape != tuple(shape):
            raise ValueError(f"tensor {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    layers = {name: tensors[name] for name in expected_layers}
    extras = {name: tensors[name] for name in expected_extras}
    return ModelWeights(spec=spec, layers=layers, extras=extras, addresses=addresses)

