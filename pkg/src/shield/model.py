"""Channel assembly, classifier head, training loop and evaluation.

The classifier input is the fixed-order concatenation of the enabled
channels: fused context vector, then the language-model state, then the
graph readout.  Disabling a channel shrinks the head accordingly; at least
one channel must stay on.  The head is one hidden relu layer ending in a
single logit; the decision threshold sits at logit zero, boundary included.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    AdamState,
    Param,
    Tensor,
    adam_step,
    bce_loss,
    concat,
    linear,
    matmul,
    mean_pool,
    relu,
    scale,
    add,
)
from .dump_io import DatasetManifest, MemeDump, load_labeled
from .errors import (
    ConfigError,
    DataError,
    DumpConsistencyError,
    DumpFormatError,
    DumpLengthError,
)
from .metrics import Metrics, accuracy, auc, compute_metrics, macro_f1
from .pcm import PcmParams, pcm_fuse
from .reference_graph import (
    ACTIVATIONS,
    GcnParams,
    build_reference_graph,
    gcn_forward,
    graph_readout,
    propagation_matrix,
)

__all__ = [
    "AblationConfig",
    "TrainConfig",
    "ModelDims",
    "HeadParams",
    "ShieldParams",
    "forward",
    "predict",
    "spm_provide",
    "train",
    "evaluate",
    "prepare_sample",
    "Metrics",
    "accuracy",
    "auc",
    "compute_metrics",
    "macro_f1",
]

ABLATION_NAMES = ("spm", "spm+pcm", "full")
SELECTION_METRICS = ("auc", "macro_f1")

PARAMS_MAGIC = b"SHLP"
PARAMS_VERSION = 1


@dataclass
class AblationConfig:
    """Which feature channels feed the head."""

    use_pcm: bool = True
    use_spm: bool = True
    use_crm: bool = True

    def __post_init__(self):
        if not (self.use_pcm or self.use_spm or self.use_crm):
            raise ConfigError("at least one channel must be enabled")

    @classmethod
    def from_name(cls, name: str) -> "AblationConfig":
        if name == "spm":
            return cls(use_pcm=False, use_spm=True, use_crm=False)
        if name == "spm+pcm":
            return cls(use_pcm=True, use_spm=True, use_crm=False)
        if name == "full":
            return cls()
        raise ConfigError(f"unknown ablation {name!r}, expected one of {ABLATION_NAMES}")

    def to_dict(self) -> dict:
        return {"use_pcm": self.use_pcm, "use_spm": self.use_spm, "use_crm": self.use_crm}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    k_ref: int = 4
    k_layers: int = 2
    fused_dim: int = 64
    hidden_dim: int = 64
    graph_dim: int | None = None  # defaults to the token width when both widths agree
    activation: str = "relu"
    selection_metric: str = "auc"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("bad optimizer hyperparameters")
        if self.k_ref < 1 or self.k_layers < 1:
            raise ConfigError("k_ref and k_layers must be at least 1")
        if self.fused_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("fused_dim and hidden_dim must be at least 1")
        if self.graph_dim is not None and self.graph_dim < 1:
            raise ConfigError("graph_dim must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}")


@dataclass
class ModelDims:
    """Shapes the parameters were built for; stored alongside them."""

    token_dim: int
    patch_dim: int
    state_dim: int
    fused_dim: int
    graph_dim: int
    hidden_dim: int
    k_layers: int
    k_ref: int
    activation: str


@dataclass
class HeadParams:
    """One hidden relu layer ending in a scalar logit."""

    weight: Param      # (hidden, in)
    bias: Param        # (hidden,)
    out_weight: Param  # (hidden,)
    out_bias: Param    # ()

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, rng: np.random.Generator) -> "HeadParams":
        from .pcm import fan_in_uniform

        bound_in = 1.0 / np.sqrt(in_dim)
        bound_h = 1.0 / np.sqrt(hidden_dim)
        return cls(
            weight=Param(fan_in_uniform(rng, hidden_dim, in_dim)),
            bias=Param(rng.uniform(-bound_in, bound_in, hidden_dim)),
            out_weight=Param(rng.uniform(-bound_h, bound_h, hidden_dim)),
            out_bias=Param(rng.uniform(-bound_h, bound_h)),
        )

    def params(self) -> list[Param]:
        return [self.weight, self.bias, self.out_weight, self.out_bias]


@dataclass
class ShieldParams:
    """Every trainable tensor of the model, plus its wiring."""

    dims: ModelDims
    ablation: AblationConfig
    pcm: PcmParams | None
    gcn: GcnParams | None
    head: HeadParams

    @classmethod
    def init(cls, dims: ModelDims, ablation: AblationConfig,
             rng: np.random.Generator) -> "ShieldParams":
        pcm = gcn = None
        if ablation.use_pcm:
            pcm = PcmParams.init(dims.fused_dim, dims.patch_dim, dims.token_dim, rng)
        if ablation.use_crm:
            gcn = GcnParams.init(dims.graph_dim, dims.k_layers, rng, dims.activation,
                                 token_dim=dims.token_dim, patch_dim=dims.patch_dim)
        head_in = head_input_dim(dims, ablation)
        head = HeadParams.init(head_in, dims.hidden_dim, rng)
        return cls(dims, ablation, pcm, gcn, head)

    def params(self) -> list[Param]:
        out: list[Param] = []
        if self.pcm is not None:
            out += self.pcm.params()
        if self.gcn is not None:
            out += self.gcn.params()
        out += self.head.params()
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        if self.pcm is not None:
            out += [("pcm.patch_weight", self.pcm.patch_weight.data),
                    ("pcm.patch_bias", self.pcm.patch_bias.data),
                    ("pcm.token_weight", self.pcm.token_weight.data),
                    ("pcm.token_bias", self.pcm.token_bias.data)]
        if self.gcn is not None:
            if self.gcn.token_projection is not None:
                out += [("gcn.token_projection", self.gcn.token_projection.data),
                        ("gcn.patch_projection", self.gcn.patch_projection.data)]
            out += [(f"gcn.layer{i}", w.data) for i, w in enumerate(self.gcn.layers)]
        out += [("head.weight", self.head.weight.data),
                ("head.bias", self.head.bias.data),
                ("head.out_weight", self.head.out_weight.data),
                ("head.out_bias", self.head.out_bias.data)]
        return out

    def copy(self) -> "ShieldParams":
        clone = ShieldParams.init(self.dims, self.ablation, np.random.default_rng(0))
        for (_, src), (_, dst) in zip(self.named_arrays(), clone.named_arrays()):
            dst[...] = src
        return clone

    def save(self, sink) -> int:
        """Binary container in the dump style: SHLP | u32 version | u32 header
        length | JSON header | concatenated row-major float64 payload."""
        arrays = self.named_arrays()
        header = {
            "ablation": self.ablation.to_dict(),
            "dims": asdict(self.dims),
            "head_input_dim": head_input_dim(self.dims, self.ablation),
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
            "dtype": "<f8",
        }
        blob = io.BytesIO()
        blob.write(PARAMS_MAGIC)
        encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob.write(struct.pack("<II", PARAMS_VERSION, len(encoded)))
        blob.write(encoded)
        for _, a in arrays:
            blob.write(a.astype("<f8", copy=False).tobytes(order="C"))
        payload = blob.getvalue()
        if isinstance(sink, (str, Path)):
            Path(sink).write_bytes(payload)
        else:
            sink.write(payload)
        return len(payload)

    @classmethod
    def load(cls, source) -> "ShieldParams":
        if isinstance(source, (str, Path)):
            with open(source, "rb") as f:
                return cls.load(f)
        magic = source.read(4)
        if magic != PARAMS_MAGIC:
            raise DumpFormatError(f"bad params magic {magic!r}, expected {PARAMS_MAGIC!r}")
        version, header_len = struct.unpack("<II", source.read(8))
        if version != PARAMS_VERSION:
            raise DumpFormatError(f"unsupported params version {version}")
        try:
            header = json.loads(source.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DumpFormatError(f"params header is not valid JSON: {e}") from e
        dims = ModelDims(**header["dims"])
        ablation = AblationConfig(**header["ablation"])
        out = cls.init(dims, ablation, np.random.default_rng(0))
        expected = out.named_arrays()
        declared = header["arrays"]
        if [d["name"] for d in declared] != [n for n, _ in expected]:
            raise DumpConsistencyError("params header arrays do not match the declared wiring")
        payload = source.read()
        need = sum(int(np.prod(d["shape"])) if d["shape"] else 1 for d in declared) * 8
        if len(payload) != need:
            raise DumpLengthError(f"params payload is {len(payload)} bytes, header requires {need}")
        offset = 0
        for d, (name, arr) in zip(declared, expected):
            if list(arr.shape) != d["shape"]:
                raise DumpConsistencyError(f"array {name} has shape {d['shape']}, wiring expects {list(arr.shape)}")
            count = int(np.prod(d["shape"])) if d["shape"] else 1
            values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            arr[...] = values.reshape(arr.shape)
            offset += count * 8
        return out


def head_input_dim(dims: ModelDims, ablation: AblationConfig) -> int:
    total = 0
    if ablation.use_pcm:
        total += dims.fused_dim
    if ablation.use_spm:
        total += dims.state_dim
    if ablation.use_crm:
        total += dims.graph_dim
    return total


def predict(logit: float) -> int:
    """Decision rule: hateful iff the logit is at least zero (sigmoid >= 1/2)."""
    return 1 if logit >= 0 else 0


def spm_provide(dump: MemeDump) -> tuple[np.ndarray, np.ndarray]:
    """The language-model channel of a dump: (state vector, attention)."""
    from .dump_io import validate_dump
    from .errors import InvalidDumpError

    violations = validate_dump(dump)
    if violations:
        raise InvalidDumpError(violations)
    return dump.llm_state.astype(np.float64), dump.attention.astype(np.float64)


@dataclass
class PreparedSample:
    """Per-sample constants cached once so epochs only touch parameters."""

    id: str
    label: int
    token_mean: np.ndarray | None
    patch_mean: np.ndarray | None
    state: np.ndarray | None
    graph: object | None
    propagation: np.ndarray | None


def prepare_sample(dump: MemeDump, k_ref: int, ablation: AblationConfig) -> PreparedSample:
    token_mean = patch_mean = state = graph = prop = None
    if ablation.use_pcm:
        token_mean = mean_pool(dump.token_embeddings.astype(np.float64)).data
        patch_mean = mean_pool(dump.patch_embeddings.astype(np.float64)).data
    if ablation.use_spm:
        state = dump.llm_state.astype(np.float64)
    if ablation.use_crm:
        graph = build_reference_graph(dump, k_ref)
        prop = propagation_matrix(graph)
    return PreparedSample(dump.id, dump.label, token_mean, patch_mean, state, graph, prop)


def _forward_prepared(sample: PreparedSample, params: ShieldParams) -> tuple[Tensor, Tensor]:
    segments = []
    if params.ablation.use_pcm:
        segments.append(pcm_fuse(Tensor(sample.patch_mean), Tensor(sample.token_mean), params.pcm))
    if params.ablation.use_spm:
        segments.append(Tensor(sample.state))
    if params.ablation.use_crm:
        node_embeddings = gcn_forward(sample.graph, params.gcn, propagation=sample.propagation)
        segments.append(graph_readout(node_embeddings))
    features = concat(segments) if len(segments) > 1 else segments[0]
    hidden = relu(linear(features, params.head.weight, params.head.bias))
    logit = add(matmul(params.head.out_weight, hidden), params.head.out_bias)
    return logit, features


def _check_dump_dims(dump: MemeDump, params: ShieldParams) -> None:
    dims = params.dims
    if dump.token_dim != dims.token_dim or dump.patch_dim != dims.patch_dim:
        raise ConfigError(
            f"dump {dump.id!r} has widths ({dump.token_dim}, {dump.patch_dim}), "
            f"params expect ({dims.token_dim}, {dims.patch_dim})")
    if params.ablation.use_spm and dump.state_dim != dims.state_dim:
        raise ConfigError(
            f"dump {dump.id!r} has state width {dump.state_dim}, params expect {dims.state_dim}")


def forward(dump: MemeDump, params: ShieldParams,
            ablation: AblationConfig | None = None) -> tuple[Tensor, Tensor]:
    """(logit, assembled feature vector) for one dump.

    The wiring always comes from the params; passing a different ablation is
    a configuration error, not an override.
    """
    if ablation is not None and ablation != params.ablation:
        raise ConfigError(
            f"requested channels {ablation.to_dict()} do not match the params, "
            f"which were built for {params.ablation.to_dict()}")
    _check_dump_dims(dump, params)
    return _forward_prepared(prepare_sample(dump, params.dims.k_ref, params.ablation), params)


def _scores(samples: list[PreparedSample], params: ShieldParams) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.label for s in samples])
    logits = np.array([_forward_prepared(s, params)[0].item() for s in samples])
    return labels, logits


def _selection_value(metric: str, labels: np.ndarray, logits: np.ndarray) -> float:
    if metric == "auc":
        return auc(labels, logits)
    return macro_f1(labels, np.array([predict(v) for v in logits]))[0]


def _resolve_dims(dumps: list[MemeDump], cfg: TrainConfig) -> ModelDims:
    first = dumps[0]
    for d in dumps[1:]:
        if (d.token_dim, d.patch_dim, d.state_dim) != (first.token_dim, first.patch_dim, first.state_dim):
            raise DataError(
                f"sample {d.id!r} has widths ({d.token_dim}, {d.patch_dim}, {d.state_dim}), "
                f"expected ({first.token_dim}, {first.patch_dim}, {first.state_dim})")
    if first.token_dim == first.patch_dim:
        graph_dim = first.token_dim if cfg.graph_dim is None else cfg.graph_dim
    else:
        graph_dim = 64 if cfg.graph_dim is None else cfg.graph_dim
    return ModelDims(
        token_dim=first.token_dim,
        patch_dim=first.patch_dim,
        state_dim=first.state_dim,
        fused_dim=cfg.fused_dim,
        graph_dim=graph_dim,
        hidden_dim=cfg.hidden_dim,
        k_layers=cfg.k_layers,
        k_ref=cfg.k_ref,
        activation=cfg.activation,
    )


def train(train_manifest: DatasetManifest, valid_manifest: DatasetManifest,
          cfg: TrainConfig, ablation: AblationConfig | None = None
          ) -> tuple[ShieldParams, list[dict]]:
    """Adam training with per-epoch selection on the validation metric.

    Returns the parameters of the best validation epoch (ties keep the
    earlier epoch) and the per-epoch history.  Bit-deterministic for a fixed
    config, seed and dataset.
    """
    cfg.validate()
    ablation = ablation or AblationConfig()
    if len(train_manifest) == 0 or len(valid_manifest) == 0:
        raise DataError("need at least one training and one validation sample")
    train_dumps = load_labeled(train_manifest)
    valid_dumps = load_labeled(valid_manifest)
    dims = _resolve_dims(train_dumps + valid_dumps, cfg)

    train_samples = [prepare_sample(d, cfg.k_ref, ablation) for d in train_dumps]
    valid_samples = [prepare_sample(d, cfg.k_ref, ablation) for d in valid_dumps]

    rng = np.random.default_rng(cfg.seed)
    params = ShieldParams.init(dims, ablation, rng)
    trainable = params.params()
    state = AdamState(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    history: list[dict] = []
    best_value = -np.inf
    best_params = params.copy()
    n = len(train_samples)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total = None
            for idx in batch:
                sample = train_samples[idx]
                logit, _ = _forward_prepared(sample, params)
                loss = bce_loss(logit, sample.label)
                total = loss if total is None else add(total, loss)
            mean_loss = scale(total, 1.0 / len(batch))
            mean_loss.backward()
            adam_step(trainable, state)
            epoch_loss += mean_loss.item() * len(batch)
        labels, logits = _scores(valid_samples, params)
        value = _selection_value(cfg.selection_metric, labels, logits)
        history.append({"epoch": epoch, "train_loss": epoch_loss / n, "valid_metric": value})
        if value > best_value:
            best_value = value
            best_params = params.copy()
    return best_params, history


def evaluate(manifest: DatasetManifest, params: ShieldParams) -> Metrics:
    """Metrics of the stored decision rule over one labeled manifest."""
    if len(manifest) == 0:
        raise DataError("nothing to evaluate")
    dumps = load_labeled(manifest)
    for d in dumps:
        _check_dump_dims(d, params)
    samples = [prepare_sample(d, params.dims.k_ref, params.ablation) for d in dumps]
    labels, logits = _scores(samples, params)
    scores = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
    preds = np.array([predict(v) for v in logits])
    return compute_metrics(labels, scores, preds)
