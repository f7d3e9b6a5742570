"""CTR networks assembled from embeddings and MLoRA dense stacks.

Every field (sparse, bucketized dense, and the domain ID itself) is embedded,
the embeddings are concatenated and fed through a ReLU MLP ending in a single
logit.  ``wdl`` adds a per-field linear (wide) term to the logit, ``deepfm``
adds first- and second-order factorization-machine terms over the shared
embeddings.  Adaptors live only on the deep dense layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConflictError, MissingDomainError, ParameterError, ShapeError
from .layers import (
    DenseLayer,
    EmbeddingTable,
    GradTape,
    MLoRADenseLayer,
    dropout_backward,
    dropout_forward,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .numerics import Rng

BACKBONES = ("mlp", "wdl", "deepfm")
PHASES = ("pretrain", "finetune", "eval")


@dataclass(frozen=True)
class FeatureSchema:
    """Input fields in model order.

    ``sparse`` and ``dense`` hold ``(name, cardinality)`` pairs; for dense
    fields the cardinality is the bucket count.  The domain ID is embedded as
    one extra trailing field with ``n_domains`` rows.
    """

    sparse: tuple[tuple[str, int], ...]
    dense: tuple[tuple[str, int], ...] = ()
    n_domains: int = 1
    domain_field: str = "domain_id"

    def __post_init__(self):
        object.__setattr__(self, "sparse", tuple((str(n), int(v)) for n, v in self.sparse))
        object.__setattr__(self, "dense", tuple((str(n), int(v)) for n, v in self.dense))
        names = [n for n, _ in self.fields] + [self.domain_field]
        if not self.fields:
            raise ConfigError("schema needs at least one field besides the domain ID", key="schema")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field names in schema: {names}", key="schema")
        for n, v in self.fields:
            if v < 1:
                raise ConfigError(f"field {n!r} has cardinality {v}", key="schema")
        if self.n_domains < 1:
            raise ConfigError("schema needs at least one domain", key="schema")

    @property
    def fields(self):
        return self.sparse + self.dense

    @property
    def field_names(self):
        return [n for n, _ in self.fields]

    def to_dict(self):
        return {"sparse": [list(f) for f in self.sparse], "dense": [list(f) for f in self.dense],
                "n_domains": self.n_domains, "domain_field": self.domain_field}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(map(tuple, d["sparse"])), tuple(map(tuple, d["dense"])),
                   int(d["n_domains"]), d.get("domain_field", "domain_id"))


@dataclass
class Sample:
    indices: tuple[int, ...]
    y: int
    t: int


@dataclass
class RegistryEntry:
    tensor: np.ndarray
    frozen: bool


@dataclass
class ForwardCache:
    phase: str
    domains: np.ndarray
    idx: np.ndarray
    inputs: list = field(default_factory=list)      # input to each dense layer
    pre: list = field(default_factory=list)         # pre-activation of each hidden layer
    masks: list = field(default_factory=list)
    emb: np.ndarray | None = None                   # (n, n_fields + 1, dim)
    use_adaptor: object = None


class CTRModel:
    def __init__(self, schema: FeatureSchema, hidden, embed_dim: int, backbone_kind: str = "mlp",
                 alpha: float = 32.0, rank_cap: int | None = None):
        hidden = [int(h) for h in hidden]
        if not hidden or min(hidden) < 1:
            raise ConfigError(f"hidden sizes must be a non-empty list of positive ints, got {hidden}",
                              key="model.hidden")
        if embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}", key="model.embed_dim")
        if backbone_kind not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone_kind!r}; expected one of {BACKBONES}",
                              key="model.backbone")
        if not alpha > 0:
            raise ConfigError(f"alpha must be positive, got {alpha}", key="train.alpha")
        self.schema = schema
        self.hidden = hidden
        self.embed_dim = int(embed_dim)
        self.backbone_kind = backbone_kind
        self.alpha = float(alpha)
        self.rank_cap = rank_cap
        self.embeddings: dict[str, EmbeddingTable] = {}
        self.layers: list[MLoRADenseLayer] = []
        self.first_order: dict[str, EmbeddingTable] = {}

    # -- structure -----------------------------------------------------------------
    @property
    def input_fields(self):
        """(name, cardinality) for every embedded field, domain ID last."""
        return list(self.schema.fields) + [(self.schema.domain_field, self.schema.n_domains)]

    @property
    def deep_in(self):
        return len(self.input_fields) * self.embed_dim

    @property
    def layer_dims(self):
        dims = [self.deep_in] + self.hidden + [1]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def domains(self):
        """Domains that own adaptors."""
        return sorted(self.layers[0].adaptors) if self.layers else []

    def _first_order_prefix(self):
        return "wide" if self.backbone_kind == "wdl" else "fm.linear"

    def allocate(self):
        """Create zero-valued tensors for the pretraining topology."""
        self.embeddings = {n: EmbeddingTable(np.zeros((v, self.embed_dim)), name=f"emb.{n}")
                           for n, v in self.input_fields}
        self.layers = [MLoRADenseLayer(DenseLayer(np.zeros((o, i)), np.zeros(o), name=f"deep.{k}"),
                                       alpha=self.alpha, cap=self.rank_cap)
                       for k, (i, o) in enumerate(self.layer_dims)]
        self.first_order = {}
        if self.backbone_kind in ("wdl", "deepfm"):
            prefix = self._first_order_prefix()
            self.first_order = {n: EmbeddingTable(np.zeros((v, 1)), name=f"{prefix}.{n}")
                                for n, v in self.input_fields}
        return self

    def backbone_parts(self):
        yield from self.embeddings.values()
        yield from self.first_order.values()
        for layer in self.layers:
            yield layer.base

    def registry(self) -> dict[str, RegistryEntry]:
        reg = {}
        for part in self.embeddings.values():
            reg.update({k: RegistryEntry(v, part.frozen) for k, v in part.tensors().items()})
        for part in self.first_order.values():
            reg.update({k: RegistryEntry(v, part.frozen) for k, v in part.tensors().items()})
        for layer in self.layers:
            reg.update({k: RegistryEntry(v, layer.base.frozen) for k, v in layer.base.tensors().items()})
        for layer in self.layers:
            for t in sorted(layer.adaptors):
                a, b = layer.adaptor_names(t)
                pair = layer.adaptors[t]
                reg[a] = RegistryEntry(pair.A, False)
                reg[b] = RegistryEntry(pair.B, False)
        return reg

    def adaptor_tensor_names(self, t):
        return [n for layer in self.layers for n in layer.adaptor_names(t)]

    def set_backbone_frozen(self, frozen: bool):
        for part in self.backbone_parts():
            part.frozen = frozen

    # -- forward / backward ----------------------------------------------------------
    def _adaptor_policy(self, phase, domains):
        if phase == "pretrain" or not self.layers[0].adaptors:
            if phase == "finetune":
                raise MissingDomainError("finetune phase requires attached adaptors")
            return lambda t: False
        have = self.layers[0].adaptors
        if phase == "finetune":
            missing = sorted(set(int(t) for t in np.unique(domains)) - set(have))
            if missing:
                raise MissingDomainError(f"no adaptor for domain(s) {missing}")
            return lambda t: True
        return lambda t: t in have

    def forward_batch(self, idx, domains, phase="eval", *, dropout=0.0, rng=None):
        """Logits for a batch; returns ``(logits, cache)``.

        ``idx`` is ``(n, n_fields)`` of field indices in schema order and
        ``domains`` is ``(n,)``.  Dropout acts on hidden activations only when
        ``phase == "pretrain"`` and an ``rng`` is supplied.
        """
        if phase not in PHASES:
            raise ParameterError(f"unknown phase {phase!r}")
        idx = np.asarray(idx, dtype=np.int64)
        domains = np.asarray(domains, dtype=np.int64)
        n_fields = len(self.schema.fields)
        if idx.ndim != 2 or idx.shape[1] != n_fields or domains.shape != (idx.shape[0],):
            raise ShapeError(f"batch shape {idx.shape} / {domains.shape} does not match "
                             f"{n_fields} schema fields")
        use = self._adaptor_policy(phase, domains)
        cache = ForwardCache(phase, domains, idx, use_adaptor=use)
        cols = [idx[:, j] for j in range(n_fields)] + [domains]
        emb = np.stack([tab.lookup(c) for tab, c in zip(self.embeddings.values(), cols)], axis=1)
        cache.emb = emb
        n = idx.shape[0]
        h = emb.reshape(n, -1)
        training = phase == "pretrain" and rng is not None
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            cache.inputs.append(h)
            z = layer.forward_routed(h, domains, use)
            if k == last:
                logits = z[:, 0]
                break
            cache.pre.append(z)
            h, mask = dropout_forward(relu_forward(z), dropout, rng, training)
            cache.masks.append(mask)
        if self.first_order:
            for tab, c in zip(self.first_order.values(), cols):
                logits = logits + tab.lookup(c)[:, 0]
        if self.backbone_kind == "deepfm":
            s = emb.sum(axis=1)
            logits = logits + 0.5 * (s * s - (emb * emb).sum(axis=1)).sum(axis=1)
        return logits, cache

    def backward(self, cache: ForwardCache, dlogits, tape: GradTape):
        n = dlogits.shape[0]
        G = dlogits.reshape(n, 1)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            G = layer.backward_routed(cache.inputs[k], cache.domains, G, tape, cache.use_adaptor)
            if k > 0:
                G = relu_backward(cache.pre[k - 1], dropout_backward(G, cache.masks[k - 1]))
        demb = G.reshape(cache.emb.shape)
        cols = [cache.idx[:, j] for j in range(cache.idx.shape[1])] + [cache.domains]
        if self.first_order:
            for tab, c in zip(self.first_order.values(), cols):
                tab.backward(c, dlogits.reshape(n, 1), tape)
        if self.backbone_kind == "deepfm":
            s = cache.emb.sum(axis=1, keepdims=True)
            demb = demb + dlogits.reshape(n, 1, 1) * (s - cache.emb)
        for j, (tab, c) in enumerate(zip(self.embeddings.values(), cols)):
            tab.backward(c, demb[:, j, :], tape)

    def predict_proba(self, idx, domains, phase="eval"):
        logits, _ = self.forward_batch(idx, domains, phase)
        return sigmoid(logits)


def build_model(schema: FeatureSchema, hidden, embed_dim: int, backbone_kind: str, alpha: float,
                rng: Rng, rank_cap: int | None = None) -> CTRModel:
    """Pretraining-topology model: Gaussian(0, 0.02) embeddings, He-scaled dense layers."""
    model = CTRModel(schema, hidden, embed_dim, backbone_kind, alpha, rank_cap).allocate()
    for tab in model.embeddings.values():
        tab.rows[...] = EmbeddingTable.init(tab.vocab_size, tab.dim, rng, tab.name).rows
    for tab in model.first_order.values():
        tab.rows[...] = EmbeddingTable.init(tab.vocab_size, 1, rng, tab.name).rows
    for layer in model.layers:
        fresh = DenseLayer.init(layer.d_in, layer.d_out, rng, layer.name)
        layer.base.W[...] = fresh.W
    return model


def attach_adaptors(model: CTRModel, domains, alpha: float | None = None, cap: int | None = None,
                    rng: Rng | None = None) -> None:
    """Add zero-effect adaptors for ``domains`` on every deep layer and freeze the backbone."""
    domains = sorted(int(t) for t in domains)
    if len(set(domains)) != len(domains):
        raise ConflictError(f"duplicate domains in {domains}")
    for t in domains:
        if t in model.layers[0].adaptors:
            raise ConflictError(f"domain {t} already has adaptors")
        if not 0 <= t < model.schema.n_domains:
            raise ConfigError(f"domain {t} outside the domain vocabulary of size "
                              f"{model.schema.n_domains}", key="domain")
    if alpha is not None:
        model.alpha = float(alpha)
    if cap is not None:
        model.rank_cap = cap
    for layer in model.layers:
        layer.alpha, layer.cap = model.alpha, model.rank_cap
    rng = rng or Rng(0)
    model.set_backbone_frozen(True)
    for t in domains:
        for layer in model.layers:
            layer.add_adaptor(t, rng)


def add_domain(model: CTRModel, t: int, rng: Rng) -> None:
    """Adaptors for one new domain; everything that exists stays untouched."""
    if not model.layers[0].adaptors:
        raise MissingDomainError("add_domain needs a model that already carries adaptors")
    if int(t) in model.layers[0].adaptors:
        raise ConflictError(f"domain {t} already has adaptors")
    attach_adaptors(model, [t], rng=rng)


def forward(model: CTRModel, sample: Sample, phase: str = "eval") -> float:
    """Click probability for a single sample."""
    idx = np.asarray(sample.indices, dtype=np.int64).reshape(1, -1)
    p = model.predict_proba(idx, np.array([sample.t]), phase)
    return float(p[0])


@dataclass
class LayerParams:
    name: str
    d_in: int
    d_out: int
    rank: int
    n_domains: int

    @property
    def adaptor_params(self):
        return self.n_domains * self.rank * (self.d_in + self.d_out)


@dataclass
class ParamReport:
    backbone_params: int
    adaptor_params: int
    layers: list[LayerParams]
    n_domains: int

    @property
    def overhead(self):
        return self.adaptor_params / self.backbone_params if self.backbone_params else 0.0

    def format(self):
        lines = [f"{'layer':<10}{'d_in':>8}{'d_out':>8}{'rank':>6}{'domains':>9}{'params':>10}"]
        for lp in self.layers:
            lines.append(f"{lp.name:<10}{lp.d_in:>8}{lp.d_out:>8}{lp.rank:>6}{lp.n_domains:>9}"
                         f"{lp.adaptor_params:>10}")
        lines.append(f"backbone parameters: {self.backbone_params}")
        lines.append(f"adaptor parameters:  {self.adaptor_params}")
        lines.append(f"overhead: {100.0 * self.overhead:.2f}%")
        return "\n".join(lines)


def param_report(model: CTRModel) -> ParamReport:
    backbone = sum(t.size for part in model.backbone_parts() for t in part.tensors().values())
    layers = []
    for layer in model.layers:
        ranks = {p.rank for p in layer.adaptors.values()}
        rank = ranks.pop() if len(ranks) == 1 else layer.rank
        layers.append(LayerParams(layer.name, layer.d_in, layer.d_out, rank, len(layer.adaptors)))
    adaptor = sum(p.n_params for layer in model.layers for p in layer.adaptors.values())
    return ParamReport(backbone, adaptor, layers, len(model.domains))
