"""End-to-end optimisation, generalization-gap tracking and ablations.

``train`` runs Adam over seeded shuffled product batches, evaluates the
model on train and validation splits after every epoch, selects the
checkpoint with the best validation MAP, and reports the normalised
train/validation loss gap per epoch together with the train/test MAP
discrepancy of the selected model.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import objectives
from .datagen import Dataset, ProductRecord
from .encoder import CoherenceEncoder, EncoderParams
from .numkernel import Parameter, Rng, Tensor
from .objectives import LossValue, ScoredList
from .regressor import Fcnn, TreeEnsemble


class DivergenceError(RuntimeError):
    """Raised when a non-finite loss appears during training."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    loss: str = "listwise"            # "listwise" | "pairwise"
    regressor: str = "tree"           # "tree" | "fcnn"
    tree_depth: int = 3
    n_trees: int = 1
    fcnn_hidden: tuple = (8, 4, 2)    # widths between 5d and 1
    listwise_attention: bool = True
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    d: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pooling: str = "mean"
    conv_kernel: int = 3
    relevance_tau: int = 1
    ndcg_gain: str = "exp"

    def validate(self) -> None:
        if self.loss not in ("listwise", "pairwise"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.regressor not in ("tree", "fcnn"):
            raise ValueError(f"unknown regressor {self.regressor!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.d < 1:
            raise ValueError("hidden size d must be >= 1")


@dataclass
class EpochReport:
    epoch: int
    r_train: float
    r_val: float
    val_map: float
    val_ndcg3: float
    val_ndcg5: float
    e_hat: float = None  # filled by generalization_curve after the run


@dataclass
class RunArtifacts:
    model: "HelpfulnessModel"
    reports: list[EpochReport]
    train_metrics: dict
    test_metrics: dict
    delta_map_value: float
    best_epoch: int


class HelpfulnessModel:
    """Encoder plus score regressor, built deterministically from a seed."""

    def __init__(self, config: TrainConfig, d_tok: int, d_img: int):
        config.validate()
        self.config = config
        root = Rng(config.seed)
        enc_params = EncoderParams.create(
            root.split(0), d_tok, d_img, config.d, config.conv_kernel
        )
        self.encoder = CoherenceEncoder(enc_params, pooling=config.pooling)
        reg_rng = root.split(1)
        if config.regressor == "tree":
            self.regressor = TreeEnsemble(
                config.tree_depth, 5 * config.d, config.n_trees, reg_rng
            )
        else:
            widths = (5 * config.d, *config.fcnn_hidden, 1)
            self.regressor = Fcnn(widths, reg_rng)

    def parameters(self) -> list[Parameter]:
        return self.encoder.params.parameters() + self.regressor.parameters()

    def score_product(self, product: ProductRecord) -> Tensor:
        context = self.encoder.encode_product(
            product, listwise=self.config.listwise_attention
        )
        return self.regressor.predict(context)

    def scored_list(self, product: ProductRecord) -> ScoredList:
        scores = self.score_product(product).value[:, 0]
        return ScoredList(scores=scores, labels=product.labels())

    def routing_product(self, product: ProductRecord) -> np.ndarray:
        """Leaf-reach probabilities for each review, (|reviews| x leaves)."""
        if not isinstance(self.regressor, TreeEnsemble):
            raise ValueError("routing statistics need the tree regressor")
        context = self.encoder.encode_product(
            product, listwise=self.config.listwise_attention
        )
        return self.regressor.route_probs(context).value

    # -- checkpointing -------------------------------------------------------

    def to_checkpoint(self, d_tok: int, d_img: int) -> dict:
        cfg = asdict(self.config)
        cfg["fcnn_hidden"] = list(self.config.fcnn_hidden)
        return {
            "format": "helprank-checkpoint-v1",
            "config": cfg,
            "d_tok": d_tok,
            "d_img": d_img,
            "params": [p.value.tolist() for p in self.parameters()],
        }

    @classmethod
    def from_checkpoint(cls, obj: dict) -> tuple["HelpfulnessModel", int, int]:
        if obj.get("format") != "helprank-checkpoint-v1":
            raise ValueError("unrecognised checkpoint format")
        cfg_dict = dict(obj["config"])
        cfg_dict["fcnn_hidden"] = tuple(cfg_dict["fcnn_hidden"])
        config = TrainConfig(**cfg_dict)
        model = cls(config, obj["d_tok"], obj["d_img"])
        params = model.parameters()
        stored = obj["params"]
        if len(stored) != len(params):
            raise ValueError(
                f"checkpoint has {len(stored)} parameter arrays, "
                f"model needs {len(params)}"
            )
        for p, raw in zip(params, stored):
            arr = np.asarray(raw, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(
                    f"checkpoint parameter shape {arr.shape} != {p.shape}"
                )
            p.value = arr
        return model, obj["d_tok"], obj["d_img"]


def save_checkpoint(model: HelpfulnessModel, d_tok: int, d_img: int, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model.to_checkpoint(d_tok, d_img), fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[HelpfulnessModel, int, int]:
    with open(path, encoding="utf-8") as fh:
        return HelpfulnessModel.from_checkpoint(json.load(fh))


class Adam:
    """Adam with bias correction; ``lr == 0`` leaves parameters untouched."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# loss plumbing
# ---------------------------------------------------------------------------

def product_loss(
    model: HelpfulnessModel, product: ProductRecord, config: TrainConfig,
    pair_rng: Rng = None, scores: ScoredList = None,
):
    """Loss value and score gradient for one product, or None (no valid pair).

    Under the pairwise objective, ``len(reviews)`` preference pairs are
    sampled per call so both objectives see a comparable number of gradient
    components per product.
    """
    if scores is None:
        scores = model.scored_list(product)
    if config.loss == "listwise":
        return objectives.listwise_loss(scores)
    labels = scores.labels
    pairs = [
        (i, j)
        for i in range(labels.size)
        for j in range(labels.size)
        if labels[i] > labels[j]
    ]
    if not pairs:
        return None
    margin = objectives.pairwise_margin(labels)
    total = 0.0
    grad = np.zeros(len(scores))
    for _ in range(len(scores)):
        pos, neg = pairs[pair_rng.integers(0, len(pairs))]
        raw = -scores.scores[pos] + scores.scores[neg] + margin
        if raw > 0:
            total += raw
            grad[pos] -= 1.0
            grad[neg] += 1.0
    return LossValue(value=total, grad=grad)


def split_mean_loss(model: HelpfulnessModel, dataset: Dataset,
                    config: TrainConfig, rng: Rng) -> float:
    """Mean per-product loss over a split with a caller-supplied pair stream."""
    return assess(model, dataset, config, rng)[0]


def _metrics(lists, tau, gain) -> dict:
    return {
        "map": objectives.mean_average_precision(lists, tau),
        "ndcg3": objectives.mean_ndcg_at(lists, 3, gain),
        "ndcg5": objectives.mean_ndcg_at(lists, 5, gain),
    }


def assess(model: HelpfulnessModel, dataset: Dataset,
           config: TrainConfig, rng: Rng) -> tuple[float, dict]:
    """Mean loss and ranking metrics from a single forward pass per product."""
    values = []
    lists = []
    for product in dataset.products:
        scored = model.scored_list(product)
        lists.append(scored)
        lv = product_loss(model, product, config, pair_rng=rng, scores=scored)
        if lv is not None:
            values.append(lv.value)
    loss = float(np.mean(values)) if values else 0.0
    return loss, _metrics(lists, config.relevance_tau, config.ndcg_gain)


def evaluate(model: HelpfulnessModel, dataset: Dataset,
             tau: int = None, gain: str = None) -> dict:
    """MAP and NDCG@3/5 of the model on one split."""
    tau = model.config.relevance_tau if tau is None else tau
    gain = model.config.ndcg_gain if gain is None else gain
    lists = [model.scored_list(p) for p in dataset.products]
    return _metrics(lists, tau, gain)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(splits, config: TrainConfig, lr_schedule=None) -> RunArtifacts:
    """Optimise a fresh model on (train, val, test) splits.

    Per-epoch product order, pair sampling and initialisation all derive
    from ``config.seed``, so identical configs give bit-identical runs.
    ``lr_schedule`` maps the 1-based step index to a step size; the default
    is the constant configured learning rate.
    """
    train_ds, val_ds, test_ds = splits
    config.validate()
    if not train_ds.products:
        raise ValueError("training split is empty")

    model = HelpfulnessModel(config, train_ds.d_tok, train_ds.d_img)
    optimizer = Adam(
        model.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps
    )
    root = Rng(config.seed)
    shuffle_rng = root.split(2)
    pair_rng = root.split(3)

    reports: list[EpochReport] = []
    best = {
        "map": -1.0,
        "params": [p.value.copy() for p in model.parameters()],
        "epoch": 0,
    }
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_ds.products))
        for batch_index, start in enumerate(
            range(0, len(order), config.batch_size)
        ):
            batch = order[start:start + config.batch_size]
            contributions = []
            for product_index in batch:
                product = train_ds.products[product_index]
                scores_tensor = model.score_product(product)
                scored = ScoredList(
                    scores=scores_tensor.value[:, 0], labels=product.labels()
                )
                lv = product_loss(
                    model, product, config, pair_rng=pair_rng, scores=scored
                )
                if lv is None:
                    continue
                if not np.isfinite(lv.value):
                    raise DivergenceError(epoch, batch_index)
                contributions.append((scores_tensor, lv))
            if not contributions:
                continue
            denom = float(len(contributions))
            for scores_tensor, lv in contributions:
                scores_tensor.backward((lv.grad / denom).reshape(-1, 1))
            step += 1
            lr_t = config.lr if lr_schedule is None else lr_schedule(step)
            optimizer.step(lr_t)
            optimizer.zero_grad()

        # fresh but identical pair streams each epoch keep the loss curves
        # comparable across epochs under the pairwise objective
        r_train = split_mean_loss(model, train_ds, config, Rng(config.seed).split(4))
        r_val, val_metrics = assess(model, val_ds, config, Rng(config.seed).split(5))
        if not (np.isfinite(r_train) and np.isfinite(r_val)):
            raise DivergenceError(epoch, -1)
        reports.append(
            EpochReport(
                epoch=epoch,
                r_train=r_train,
                r_val=r_val,
                val_map=val_metrics["map"],
                val_ndcg3=val_metrics["ndcg3"],
                val_ndcg5=val_metrics["ndcg5"],
            )
        )
        if val_metrics["map"] > best["map"]:
            best = {
                "map": val_metrics["map"],
                "params": [p.value.copy() for p in model.parameters()],
                "epoch": epoch,
            }

    for p, value in zip(model.parameters(), best["params"]):
        p.value = value.copy()
    generalization_curve(reports)

    train_metrics = evaluate(model, train_ds)
    test_metrics = evaluate(model, test_ds) if test_ds.products else {
        "map": 0.0, "ndcg3": 0.0, "ndcg5": 0.0,
    }
    return RunArtifacts(
        model=model,
        reports=reports,
        train_metrics=train_metrics,
        test_metrics=test_metrics,
        delta_map_value=delta_map(train_metrics["map"], test_metrics["map"]),
        best_epoch=best["epoch"],
    )


def _min_max(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo == 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def generalization_curve(reports: list[EpochReport]) -> np.ndarray:
    """Fill ``e_hat`` per epoch: gap of independently min-max scaled losses.

    A constant loss sequence normalises to zeros.  Values always lie in
    [-1, 1] because each series is scaled to [0, 1] first.
    """
    if len(reports) == 0:
        return np.zeros(0)
    if len(reports) == 1:
        reports[0].e_hat = 0.0
        return np.zeros(1)
    train_curve = _min_max(np.array([r.r_train for r in reports]))
    val_curve = _min_max(np.array([r.r_val for r in reports]))
    gaps = val_curve - train_curve
    for report, gap in zip(reports, gaps):
        report.e_hat = float(gap)
    return gaps


def delta_map(map_train: float, map_test: float) -> float:
    """Absolute train/test MAP discrepancy (an overfitting proxy)."""
    return abs(map_train - map_test)


def reports_to_csv(reports: list[EpochReport]) -> str:
    lines = ["epoch,R_train,R_val,E_hat,MAP,NDCG3,NDCG5"]
    for r in reports:
        e_hat = 0.0 if r.e_hat is None else r.e_hat
        lines.append(
            f"{r.epoch},{r.r_train:.10g},{r.r_val:.10g},{e_hat:.10g},"
            f"{r.val_map:.10g},{r.val_ndcg3:.10g},{r.val_ndcg5:.10g}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_FCNN_VARIANTS = ((8, 4, 2), (32, 16, 8, 4, 2), (32, 32, 32, 32))


def ablation_grid(base: TrainConfig) -> list[TrainConfig]:
    """Regressor x loss x listwise-attention grid sharing the base seed."""
    regressors = [("tree", base.fcnn_hidden)] + [
        ("fcnn", hidden) for hidden in ABLATION_FCNN_VARIANTS
    ]
    grid = []
    for reg, hidden in regressors:
        for loss in ("listwise", "pairwise"):
            for lan in (True, False):
                cfg = copy.deepcopy(base)
                cfg.regressor = reg
                cfg.fcnn_hidden = tuple(hidden)
                cfg.loss = loss
                cfg.listwise_attention = lan
                grid.append(cfg)
    return grid


def ablate(splits, base: TrainConfig) -> list[dict]:
    """Train every grid variant and report validation/test ranking metrics."""
    rows = []
    for cfg in ablation_grid(base):
        artifacts = train(splits, cfg)
        val = evaluate(artifacts.model, splits[1])
        rows.append(
            {
                "regressor": cfg.regressor,
                "fcnn_hidden": "-".join(str(w) for w in cfg.fcnn_hidden)
                if cfg.regressor == "fcnn" else "",
                "loss": cfg.loss,
                "listwise_attention": cfg.listwise_attention,
                "val_map": val["map"],
                "val_ndcg3": val["ndcg3"],
                "val_ndcg5": val["ndcg5"],
                "test_map": artifacts.test_metrics["map"],
                "test_ndcg3": artifacts.test_metrics["ndcg3"],
                "test_ndcg5": artifacts.test_metrics["ndcg5"],
            }
        )
    return rows


def ablation_to_csv(rows: list[dict]) -> str:
    header = (
        "regressor,fcnn_hidden,loss,listwise_attention,"
        "val_MAP,val_NDCG3,val_NDCG5,test_MAP,test_NDCG3,test_NDCG5"
    )
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['regressor']},{r['fcnn_hidden']},{r['loss']},"
            f"{str(r['listwise_attention']).lower()},"
            f"{r['val_map']:.10g},{r['val_ndcg3']:.10g},{r['val_ndcg5']:.10g},"
            f"{r['test_map']:.10g},{r['test_ndcg3']:.10g},{r['test_ndcg5']:.10g}"
        )
    return "\n".join(lines) + "\n"
