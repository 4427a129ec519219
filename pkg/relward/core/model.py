"""Full network assembly, exact reverse-mode gradients, loss and checkpoints.

Stage order: acoustic filterbank -> acoustic relevance -> instance norm -> prune
-> modulation conv -> 3x1 pool -> modulation relevance -> batch norm -> head.
Everything up to the modulation relevance and the head are computed per sample;
batch norm couples the samples of one batch.
"""

import contextlib
import copy
import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy import special

from ..utils.files import atomic_write_text
from ..utils.seeding import stream
from .audio import RawFrameBlock
from .errors import ArgumentError, ContractError, DegenerateBatchError, FormatError
from .filterbank import (
    AcousticCache,
    FilterbankParams,
    KernelBank,
    KernelFamily,
    acoustic_backward,
    acoustic_forward_cached,
    clip_mu,
    init_mel,
    mu_gradient,
    synthesize_kernels,
)
from .head import HEAD_KEYS, HeadCache, head_backward, head_flat_size, head_forward, init_head
from .modulation import (
    ModulationCache,
    ModulationKernels,
    PoolCache,
    init_modulation_kernels,
    max_pool_3x1_backward,
    max_pool_3x1_cached,
    modulation_backward,
    modulation_forward_cached,
)
from .normalization import (
    BatchNormCache,
    BatchNormState,
    InstanceNormCache,
    NormMode,
    batch_norm_backward,
    batch_norm_cached,
    instance_norm_backward,
    instance_norm_cached,
    prune_center,
    prune_center_backward,
)
from .relevance import (
    Pooling,
    RelevanceCache,
    RelevanceNet,
    RelevanceWeights,
    acoustic_relevance_cached,
    apply_acoustic_weights,
    apply_modulation_weights,
    init_relevance_net,
    modulation_relevance_cached,
    relevance_backward,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "relward-checkpoint"
CHECKPOINT_VERSION = 1

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class Variant:
    """Kernel family plus the two relevance switches."""

    name: str
    family: KernelFamily
    acoustic_relevance: bool
    modulation_relevance: bool


VARIANTS: Dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("MFB", KernelFamily.FIXED_MEL, False, False),
        Variant("MFB-R", KernelFamily.FIXED_MEL, True, False),
        Variant("A", KernelFamily.COSINE_GAUSSIAN, False, False),
        Variant("A-R", KernelFamily.COSINE_GAUSSIAN, True, False),
        Variant("A-R,M-R", KernelFamily.COSINE_GAUSSIAN, True, True),
        Variant("Sinc", KernelFamily.SINC, False, False),
        Variant("S-R,M-R", KernelFamily.SINC, True, True),
    )
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ArgumentError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and constants of the network (see RunSettings ``model.*``)."""

    f: int = 80
    k: int = 129
    frame_len: int = 400
    hop: int = 160
    frames: int = 101
    keep: int = 21
    fmin: float = 60.0
    fmax: float = 7800.0
    sample_rate: int = 16000
    acoustic_hidden: int = 128
    mod_hidden: int = 32
    mod_maps: int = 40
    mod_kf: int = 5
    mod_kt: int = 5
    head_maps: int = 16
    head_kernel: int = 3
    head_fc1: int = 256
    head_fc2: int = 128
    classes: int = 8
    instance_norm_c: float = 1e-4
    batch_norm_c: float = 1e-4
    bn_momentum: float = 0.1
    norm_after_prune: bool = False

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise FormatError(f"unknown model settings: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def mod_rows(self) -> int:
        return self.f - self.mod_kf + 1

    @property
    def pooled_rows(self) -> int:
        return self.mod_rows // 3

    @property
    def mod_cols(self) -> int:
        return self.keep - self.mod_kt + 1

    def validate(self) -> None:
        if self.classes < 2:
            raise ArgumentError(f"need at least 2 classes, got {self.classes}")
        if self.frames % 2 == 0 or self.keep % 2 == 0 or self.keep > self.frames:
            raise ArgumentError(f"frames ({self.frames}) and keep ({self.keep}) must be odd with keep <= frames")
        if self.frame_len < self.k:
            raise ArgumentError(f"frame_len {self.frame_len} shorter than kernel length {self.k}")
        if self.mod_rows < 3 or self.mod_cols < 1:
            raise ArgumentError(
                f"modulation kernel {self.mod_kf}x{self.mod_kt} leaves a {self.mod_rows}x{self.mod_cols} map"
            )
        head_flat_size(self.head_maps, self.pooled_rows, self.mod_cols)


def tiny_config(**overrides) -> ModelConfig:
    """Small shapes for gradient checks and fast tests."""
    values = dict(
        f=8,
        k=17,
        frame_len=64,
        hop=32,
        frames=11,
        keep=5,
        acoustic_hidden=6,
        mod_hidden=5,
        mod_maps=4,
        mod_kf=3,
        mod_kt=3,
        head_maps=3,
        head_fc1=8,
        head_fc2=6,
        classes=3,
    )
    values.update(overrides)
    return ModelConfig(**values)


PARAM_ORDER = (
    "fb.mu",
    "acoustic_net.W1",
    "acoustic_net.b1",
    "acoustic_net.W2",
    "acoustic_net.b2",
    "mod.kernels",
    "mod.bias",
    "mod_net.W1",
    "mod_net.b1",
    "mod_net.W2",
    "mod_net.b2",
    "bn.gamma",
    "bn.beta",
) + tuple(f"head.{key}" for key in HEAD_KEYS)


@dataclass
class AcousticModel:
    """All trainable tensors (``params``) plus non-trainable state (``buffers``)."""

    config: ModelConfig
    variant: Variant
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    @property
    def fb(self) -> FilterbankParams:
        return FilterbankParams(
            mu=self.params["fb.mu"],
            family=self.variant.family,
            k=self.config.k,
            bandwidth=self.buffers.get("fb.bandwidth"),
        )

    def _net(self, prefix: str, pooling: Pooling) -> RelevanceNet:
        p = self.params
        return RelevanceNet(p[f"{prefix}.W1"], p[f"{prefix}.b1"], p[f"{prefix}.W2"], p[f"{prefix}.b2"], pooling)

    @property
    def acoustic_net(self) -> RelevanceNet:
        return self._net("acoustic_net", Pooling.TIME_AVERAGE)

    @property
    def mod_net(self) -> RelevanceNet:
        return self._net("mod_net", Pooling.GLOBAL_AVERAGE)

    @property
    def mod_kernels(self) -> ModulationKernels:
        return ModulationKernels(self.params["mod.kernels"], self.params["mod.bias"])

    @property
    def bn(self) -> BatchNormState:
        return BatchNormState(
            running_mean=self.buffers["bn.running_mean"],
            running_var=self.buffers["bn.running_var"],
            gamma=self.params["bn.gamma"],
            beta=self.params["bn.beta"],
            momentum=self.config.bn_momentum,
            c_bn=self.config.batch_norm_c,
        )

    @property
    def head(self) -> Dict[str, np.ndarray]:
        return {key: self.params[f"head.{key}"] for key in HEAD_KEYS}

    def copy(self) -> "AcousticModel":
        return copy.deepcopy(self)

    def clip_filters(self) -> int:
        """Keep center frequencies inside (0, 0.5) after an update."""
        return clip_mu(self.params["fb.mu"])

    def trainable_names(self, freeze_filters: bool = False) -> List[str]:
        """Tensors that receive gradients in this variant."""
        names = []
        for name in PARAM_ORDER:
            if name == "fb.mu" and (freeze_filters or not self.variant.family.learnable):
                continue
            if name.startswith("acoustic_net.") and not self.variant.acoustic_relevance:
                continue
            if name.startswith("mod_net.") and not self.variant.modulation_relevance:
                continue
            names.append(name)
        return names


def init_model(
    config: ModelConfig, variant: Union[Variant, str], seed: int, zero_relevance_output: bool = True
) -> AcousticModel:
    """Fresh model: mel-initialized filters, Glorot layers, uniform starting relevance."""
    config.validate()
    variant = get_variant(variant) if isinstance(variant, str) else variant
    rng = stream(seed, "init")
    fb = init_mel(config.f, config.fmin, config.fmax, config.sample_rate, variant.family, config.k)

    params: Dict[str, np.ndarray] = {"fb.mu": fb.mu.copy()}
    acoustic = init_relevance_net(
        config.f, config.acoustic_hidden, config.f, Pooling.TIME_AVERAGE, rng, zero_relevance_output
    )
    params.update({f"acoustic_net.{k}": v for k, v in _net_tensors(acoustic).items()})
    mk = init_modulation_kernels(config.mod_maps, config.mod_kf, config.mod_kt, rng)
    params["mod.kernels"] = mk.kernels
    params["mod.bias"] = mk.bias
    mod_net = init_relevance_net(
        config.mod_maps, config.mod_hidden, config.mod_maps, Pooling.GLOBAL_AVERAGE, rng, zero_relevance_output
    )
    params.update({f"mod_net.{k}": v for k, v in _net_tensors(mod_net).items()})
    bn = BatchNormState.fresh(config.mod_maps, config.bn_momentum, config.batch_norm_c)
    params["bn.gamma"] = bn.gamma
    params["bn.beta"] = bn.beta
    head = init_head(
        config.mod_maps,
        config.pooled_rows,
        config.mod_cols,
        config.head_maps,
        config.head_kernel,
        config.head_fc1,
        config.head_fc2,
        config.classes,
        rng,
    )
    params.update({f"head.{k}": v for k, v in head.items()})

    buffers = {"bn.running_mean": bn.running_mean, "bn.running_var": bn.running_var}
    if fb.bandwidth is not None:
        buffers["fb.bandwidth"] = fb.bandwidth
    return AcousticModel(config, variant, {name: params[name] for name in PARAM_ORDER}, buffers)


def _net_tensors(net: RelevanceNet) -> Dict[str, np.ndarray]:
    return {"W1": net.W1, "b1": net.b1, "W2": net.W2, "b2": net.b2}


class GradientSet:
    """One gradient tensor per model parameter, same names and shapes."""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = tensors

    @classmethod
    def zeros(cls, model: AcousticModel) -> "GradientSet":
        return cls({name: np.zeros_like(value) for name, value in model.params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.tensors.values())

    def check_shapes(self, model: AcousticModel) -> None:
        for name, value in model.params.items():
            grad = self.tensors.get(name)
            if grad is None or grad.shape != value.shape:
                raise ContractError(f"gradient for {name} missing or mis-shaped", stage="gradients")


@dataclass
class FrontCache:
    acoustic: AcousticCache
    x: np.ndarray
    acoustic_relevance: Optional[RelevanceCache]
    norm: InstanceNormCache
    z: np.ndarray
    modulation: ModulationCache
    pool: PoolCache
    pooled: np.ndarray
    modulation_relevance: Optional[RelevanceCache]
    q: np.ndarray


@dataclass
class ForwardCache:
    mode: NormMode
    bank: KernelBank
    fronts: List[FrontCache]
    bn: BatchNormCache
    heads: List[HeadCache]
    logits: np.ndarray


@contextlib.contextmanager
def _stage(name: str):
    """Re-raise shape problems as contract errors naming the stage."""
    try:
        yield
    except DegenerateBatchError:
        raise
    except ArgumentError as e:
        raise ContractError(str(e), stage=name) from e


def _map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    """Order-preserving map, threaded when ``workers > 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _front_forward(model: AcousticModel, bank: KernelBank, block: RawFrameBlock) -> FrontCache:
    cfg, variant = model.config, model.variant
    with _stage("input"):
        if block.frames.shape != (cfg.frames, cfg.frame_len):
            raise ArgumentError(f"block shape {block.frames.shape} != ({cfg.frames}, {cfg.frame_len})")
    with _stage("acoustic_filterbank"):
        x, acoustic = acoustic_forward_cached(block, bank)
    with _stage("acoustic_relevance"):
        rel_a = None
        y = x
        if variant.acoustic_relevance:
            rel_a = acoustic_relevance_cached(x, model.acoustic_net)
            y = apply_acoustic_weights(x, RelevanceWeights(rel_a.weights))
    with _stage("instance_norm"):
        if cfg.norm_after_prune:
            z, norm = instance_norm_cached(prune_center(y, cfg.keep), cfg.instance_norm_c)
        else:
            z_full, norm = instance_norm_cached(y, cfg.instance_norm_c)
            z = prune_center(z_full, cfg.keep)
    with _stage("modulation"):
        p, modulation = modulation_forward_cached(z, model.mod_kernels)
        pooled, pool = max_pool_3x1_cached(p)
    with _stage("modulation_relevance"):
        rel_m = None
        q = pooled.maps
        if variant.modulation_relevance:
            rel_m = modulation_relevance_cached(pooled, model.mod_net)
            q = apply_modulation_weights(pooled, RelevanceWeights(rel_m.weights)).maps
    return FrontCache(acoustic, x.values, rel_a, norm, z.values, modulation, pool, pooled.maps, rel_m, q)


def forward(
    model: AcousticModel,
    blocks: Union[RawFrameBlock, Sequence[RawFrameBlock]],
    mode: Union[NormMode, str] = NormMode.EVAL,
    workers: int = 1,
    track_running_stats: bool = True,
) -> Tuple[np.ndarray, ForwardCache]:
    """Logits for one block (shape C) or a batch (shape B x C), plus the backward cache."""
    mode = NormMode(mode)
    single = isinstance(blocks, RawFrameBlock)
    batch = [blocks] if single else list(blocks)
    if not batch:
        raise ArgumentError("forward needs at least one block")
    with _stage("acoustic_filterbank"):
        bank = synthesize_kernels(model.fb)
    fronts = _map(lambda block: _front_forward(model, bank, block), batch, workers)
    with _stage("batch_norm"):
        normalized, bn_cache = batch_norm_cached(
            np.stack([front.q for front in fronts]), model.bn, mode, track_running_stats
        )
    head = model.head
    with _stage("head"):
        outputs = _map(lambda r: head_forward(r, head), list(normalized), workers)
    logits = np.stack([out[0] for out in outputs])
    cache = ForwardCache(mode, bank, fronts, bn_cache, [out[1] for out in outputs], logits)
    return (logits[0] if single else logits), cache


def cross_entropy(logits: np.ndarray, class_id: int) -> float:
    """Negative log softmax probability of ``class_id`` (nats)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or len(logits) < 2:
        raise ArgumentError(f"cross entropy needs at least 2 logits, got shape {logits.shape}")
    if not 0 <= class_id < len(logits):
        raise ArgumentError(f"class {class_id} out of range for {len(logits)} classes")
    return float(special.logsumexp(logits) - logits[class_id])


def batch_loss(logits: np.ndarray, class_ids: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean cross entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    class_ids = np.asarray(class_ids, dtype=int).reshape(-1)
    if len(class_ids) != logits.shape[0]:
        raise ArgumentError(f"{len(class_ids)} labels for {logits.shape[0]} logit rows")
    losses = [cross_entropy(row, int(c)) for row, c in zip(logits, class_ids)]
    probs = special.softmax(logits, axis=1)
    probs[np.arange(len(class_ids)), class_ids] -= 1.0
    return float(np.mean(losses)), probs / len(class_ids)


def _front_backward(
    model: AcousticModel, bank: KernelBank, front: FrontCache, dq: np.ndarray
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    cfg, variant = model.config, model.variant
    grads: Dict[str, np.ndarray] = {}

    dpooled = dq
    if front.modulation_relevance is not None:
        weights = front.modulation_relevance.weights
        dw = np.sum(dq * front.pooled, axis=(1, 2))
        dpooled = weights[:, None, None] * dq
        dmaps, net_grads = relevance_backward(dw, front.modulation_relevance, model.mod_net)
        dpooled = dpooled + dmaps
        grads.update({f"mod_net.{k}": v for k, v in net_grads.items()})

    dp = max_pool_3x1_backward(dpooled, front.pool)
    dz, grads["mod.kernels"], grads["mod.bias"] = modulation_backward(dp, front.modulation, model.mod_kernels)

    if cfg.norm_after_prune:
        dy = prune_center_backward(instance_norm_backward(dz, front.norm), cfg.frames)
    else:
        dy = instance_norm_backward(prune_center_backward(dz, cfg.frames), front.norm)

    dx = dy
    if front.acoustic_relevance is not None:
        weights = front.acoustic_relevance.weights
        dw = np.sum(dy * front.x, axis=1)
        dx = weights[:, None] * dy
        dspec, net_grads = relevance_backward(dw, front.acoustic_relevance, model.acoustic_net)
        dx = dx + dspec
        grads.update({f"acoustic_net.{k}": v for k, v in net_grads.items()})

    dkernels, _ = acoustic_backward(dx, front.acoustic, bank)
    return grads, dkernels


def backward_from_logits(
    model: AcousticModel, cache: Optional[ForwardCache], dlogits: np.ndarray, workers: int = 1
) -> GradientSet:
    """Exact gradients of ``sum(dlogits * logits)`` for every parameter."""
    if cache is None:
        raise ContractError("backward called without a forward cache", stage="backward")
    dlogits = np.atleast_2d(dlogits)
    if dlogits.shape != cache.logits.shape:
        raise ContractError(f"dlogits shape {dlogits.shape} != logits shape {cache.logits.shape}", stage="backward")
    grads = GradientSet.zeros(model)
    head = model.head

    head_out = _map(lambda pair: head_backward(pair[0], pair[1], head), list(zip(dlogits, cache.heads)), workers)
    for _, head_grads in head_out:
        for key, value in head_grads.items():
            grads.tensors[f"head.{key}"] += value

    dq, dgamma, dbeta = batch_norm_backward(np.stack([d for d, _ in head_out]), cache.bn)
    grads.tensors["bn.gamma"] += dgamma
    grads.tensors["bn.beta"] += dbeta

    front_out = _map(
        lambda pair: _front_backward(model, cache.bank, pair[0], pair[1]), list(zip(cache.fronts, dq)), workers
    )
    dkernels = np.zeros_like(cache.bank.kernels)
    for front_grads, dk in front_out:
        for name, value in front_grads.items():
            grads.tensors[name] += value
        dkernels += dk
    grads.tensors["fb.mu"] += mu_gradient(dkernels, model.fb)
    return grads


def backward(
    model: AcousticModel, cache: Optional[ForwardCache], class_ids: Union[int, Sequence[int]], workers: int = 1
) -> Tuple[float, GradientSet]:
    """Mean cross-entropy loss of the cached batch and its gradients."""
    if cache is None:
        raise ContractError("backward called without a forward cache", stage="backward")
    labels = [class_ids] if isinstance(class_ids, (int, np.integer)) else list(class_ids)
    loss, dlogits = batch_loss(cache.logits, labels)
    return loss, backward_from_logits(model, cache, dlogits, workers)


def predict(model: AcousticModel, blocks: Sequence[RawFrameBlock], batch: int = 32, workers: int = 1) -> np.ndarray:
    """Eval-mode logits for many blocks, in chunks."""
    rows = []
    for start in range(0, len(blocks), batch):
        logits, _ = forward(model, blocks[start : start + batch], NormMode.EVAL, workers)
        rows.append(np.atleast_2d(logits))
    return np.concatenate(rows) if rows else np.zeros((0, model.config.classes))


def _tensor_records(tensors: Dict[str, np.ndarray]) -> List[Dict[str, Any]]:
    return [
        {"name": name, "shape": list(value.shape), "values": np.ascontiguousarray(value).ravel().tolist()}
        for name, value in tensors.items()
    ]


def checkpoint_text(model: AcousticModel, step: int = 0) -> str:
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": model.variant.name,
        "config": model.config.to_dict(),
        "step": int(step),
        "tensors": _tensor_records(model.params),
        "buffers": _tensor_records(model.buffers),
    }
    return json.dumps(document, separators=(",", ":")) + "\n"


def save_checkpoint(model: AcousticModel, path: Union[str, Path], step: int = 0) -> Path:
    """Write every tensor (row-major float64, exact repr) and the step counter."""
    path = atomic_write_text(path, checkpoint_text(model, step))
    logger.debug("Saved checkpoint %s (step %d)", path, step)
    return path


def resolve_checkpoint(path: Union[str, Path]) -> Path:
    """Accept a run directory or a checkpoint file."""
    path = Path(path)
    return path / "checkpoint.json" if path.is_dir() else path


def load_checkpoint(path: Union[str, Path]) -> Tuple[AcousticModel, int]:
    """Inverse of :func:`save_checkpoint`; bit-exact."""
    path = resolve_checkpoint(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a checkpoint ({e})") from e
    if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format/version")

    def tensors(records) -> Dict[str, np.ndarray]:
        out = {}
        for record in records:
            values = np.array(record["values"], dtype=np.float64)
            out[record["name"]] = values.reshape(record["shape"])
        return out

    config = ModelConfig.from_dict(document["config"])
    variant = get_variant(document["variant"])
    model = AcousticModel(config, variant, tensors(document["tensors"]), tensors(document["buffers"]))
    if list(model.params) != list(PARAM_ORDER):
        raise FormatError(f"{path}: checkpoint tensors do not match the model layout")
    reference = init_model(config, model.variant, 0)
    for name, value in reference.params.items():
        if model.params[name].shape != value.shape:
            raise ContractError(
                f"{name} has shape {model.params[name].shape}, expected {value.shape}", stage="checkpoint"
            )
    return model, int(document["step"])
