"""Per-client refinement of the prediction head on SMOTE-balanced latents."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from .data import ClientDataset, NUM_CLASSES, Partition
from .metrics import compute_metrics
from .model import Network
from .smote import SmoteConfig, smote_balance


@dataclass
class PersonalizationConfig:
    epochs: int = 10
    batch_size: int = 10
    learning_rate: float = 0.01
    k_neighbors: int = 5
    level: str = "user"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.k_neighbors < 1:
            raise ValueError("personalisation settings must be positive")
        if self.level not in ("user", "home"):
            raise ValueError(f"level must be 'user' or 'home', got {self.level!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentDataset:
    Z: np.ndarray
    y: np.ndarray
    client_id: int
    synthetic: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=NUM_CLASSES)


def encode_dataset(net: Network, params, data: ClientDataset, batch_size: int = 500) -> LatentDataset:
    """Latent vectors of every sample under the (frozen) encoder."""
    chunks = [net.encode(params, data.X[i:i + batch_size]) for i in range(0, len(data), batch_size)]
    Z = np.concatenate(chunks) if chunks else np.zeros((0, net.arch.latent_dim))
    return LatentDataset(Z, data.y.copy(), data.client_id)


def balance_latents(latents: LatentDataset, cfg: SmoteConfig | None = None, seed=None) -> LatentDataset:
    """SMOTE in latent space; ``seed`` overrides ``cfg.seed`` when given."""
    cfg = cfg or SmoteConfig()
    Z, y, mask = smote_balance(latents.Z, latents.y, cfg.k_neighbors, cfg.seed if seed is None else seed)
    return LatentDataset(Z, y, latents.client_id, mask)


def fine_tune_head(net: Network, params, latents: LatentDataset, cfg: PersonalizationConfig,
                   seed=None) -> np.ndarray:
    """Minibatch SGD on the head's cross-entropy over latent inputs.
    Encoder and decoder values are returned bit-for-bit unchanged."""
    if len(latents) == 0:
        raise ValueError("nothing to fine-tune on")
    out = np.array(params, dtype=np.float64)
    head = net.segments["head"]
    seed = cfg.seed if seed is None else seed
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([seed, 303, latents.client_id, epoch])
        order = rng.permutation(len(latents))
        for i in range(0, len(order), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            _, grad = net.head_loss_and_grad(out, latents.Z[b], latents.y[b])
            out[head] -= cfg.learning_rate * grad[head]
    return out


def personalize_client(net: Network, global_params, client: ClientDataset,
                       cfg: PersonalizationConfig | None = None) -> np.ndarray:
    """Encode, rebalance with SMOTE, fine-tune the head."""
    cfg = cfg or PersonalizationConfig()
    lat = encode_dataset(net, global_params, client)
    bal = balance_latents(lat, SmoteConfig(cfg.k_neighbors), [cfg.seed, 404, client.client_id])
    return fine_tune_head(net, global_params, bal, cfg)


def group_data(part: Partition, level: str) -> dict[int, tuple[list[int], ClientDataset]]:
    """Personalisation units: every user on its own, or every home."""
    pooled = part.pooled_train()
    groups = {}
    if level == "user":
        for t in part.test_sets:
            u = t.client_id
            groups[u] = ([u], pooled.subset(pooled.user_ids == u))
            groups[u][1].client_id = u
    else:
        for home, members in sorted(part.homes.items()):
            data = pooled.subset(np.isin(pooled.user_ids, members))
            data.client_id = int(home)
            groups[int(home)] = (list(members), data)
    return groups


@dataclass
class PersonalizationResult:
    unit: int
    members: list[int]
    params: np.ndarray
    pre_accuracy: dict[int, float]
    post_accuracy: dict[int, float]
    predictions: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def personalize_all(net: Network, global_params, part: Partition,
                    cfg: PersonalizationConfig | None = None) -> list[PersonalizationResult]:
    """Personalise every user (or home) and score each member on its own
    test split before and after."""
    cfg = cfg or PersonalizationConfig()
    tests = {t.client_id: t for t in part.test_sets}
    out = []
    for unit, (members, data) in group_data(part, cfg.level).items():
        params = personalize_client(net, global_params, data, cfg)
        pre, post, preds = {}, {}, {}
        for u in members:
            t = tests[u]
            preds[u] = net.predict_proba(params, t.X).argmax(1)
            pre[u] = compute_metrics(net.predict_proba(global_params, t.X).argmax(1), t.y).accuracy
            post[u] = compute_metrics(preds[u], t.y).accuracy
        out.append(PersonalizationResult(unit, members, params, pre, post, preds))
    return out
