"""Composite objective, Adam loop, metrics ledger, sweep, and model selection.

The total objective is reconstruction (Huber) plus codebook, commitment,
and adversarial cross-entropy terms with configurable weights.  The
adversarial strength is a single knob: the gradient-reversal scale.  The
classifier always trains at full strength, so its accuracy stays a usable
leakage probe even when the reversal scale is zero.

Per-step metrics go to a tab-separated ledger; candidate runs are compared
on final-window means and ranked by the selection rule: keep candidates
with low speaker accuracy and high codebook perplexity, then prefer the
lowest reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import bottleneck as bn
from .autodiff import Tensor
from .model import VcModel, save_checkpoint
from .signal import MelSpectrogram


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, step: int, checkpoint_path=None):
        suffix = f"; last good state at {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"non-finite loss at step {step}{suffix}")
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the four loss terms plus the Huber threshold.

    `beta` scales the commitment term inside the quantizer; `delta` is the
    Huber transition point.  The top-level term weights default to 1.0.
    """

    gamma: float = 1.0     # codebook term
    epsilon: float = 1.0   # commitment term
    eta: float = 1.0       # adversarial term
    beta: float = 0.25     # commitment scale inside the quantizer
    delta: float = 1.0     # Huber threshold

    def __post_init__(self):
        for name in ("gamma", "epsilon", "eta", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


def huber(y, y_hat, delta: float = 1.0) -> Tensor:
    """Mean Huber loss: 0.5*d^2 below `delta`, delta*(|d| - delta/2) beyond."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ad.ShapeError("huber", y.shape, y_hat.shape)
    d = ad.sub(y, y_hat)
    abs_d = ad.add(ad.relu(d), ad.relu(ad.neg(d)))
    # branch choice is locally constant; both branches agree in value and
    # slope at |d| = delta, so treating the mask as constant is exact
    mask = Tensor((np.abs(d.values) < delta).astype(d.dtype))
    inv_mask = Tensor((1.0 - mask.values).astype(d.dtype))
    half = Tensor(np.asarray(0.5, dtype=d.dtype))
    quad = ad.mul(ad.mul(half, d), d)
    lin = ad.mul(Tensor(np.asarray(delta, dtype=d.dtype)),
                 ad.sub(abs_d, Tensor(np.asarray(0.5 * delta, dtype=d.dtype))))
    return ad.reduce_mean(ad.add(ad.mul(mask, quad), ad.mul(inv_mask, lin)))


def total_loss(recon: Tensor, codebook: Tensor, commit: Tensor, adv: Tensor,
               weights: LossWeights) -> Tensor:
    """Weighted sum of the four components."""
    def scaled(t: Tensor, w: float) -> Tensor:
        return ad.mul(t, Tensor(np.asarray(w, dtype=t.dtype)))

    return ad.add(
        ad.add(recon, scaled(codebook, weights.gamma)),
        ad.add(scaled(commit, weights.epsilon), scaled(adv, weights.eta)),
    )


class Adam:
    """Standard Adam with bias correction; a zero gradient is a no-op."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class StepMetrics:
    step: int
    recon: float
    codebook: float
    commit: float
    adv: float
    speaker_acc: float
    perplexity: float


LEDGER_FIELDS = ("recon", "codebook", "commit", "adv", "speaker_acc", "perplexity")


class MetricsLedger:
    """Per-step training metrics with a deterministic tab-separated file form."""

    def __init__(self):
        self.records: list[StepMetrics] = []

    def append(self, m: StepMetrics) -> None:
        if self.records and m.step <= self.records[-1].step:
            raise ValueError(f"steps must increase: {m.step} after {self.records[-1].step}")
        values = [m.recon, m.codebook, m.commit, m.adv, m.speaker_acc, m.perplexity]
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"non-finite metric at step {m.step}")
        self.records.append(m)

    def __len__(self) -> int:
        return len(self.records)

    def lines(self) -> list[str]:
        return [
            "\t".join([str(m.step)] + [f"{getattr(m, f):.9g}" for f in LEDGER_FIELDS])
            for m in self.records
        ]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")

    @staticmethod
    def read(path) -> "MetricsLedger":
        ledger = MetricsLedger()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.split("\t")
            if len(parts) != 1 + len(LEDGER_FIELDS):
                raise ValueError(f"{path}: malformed ledger line: {line!r}")
            ledger.append(StepMetrics(int(parts[0]), *[float(x) for x in parts[1:]]))
        return ledger

    def final_window_means(self, fraction: float = 0.1) -> dict[str, float]:
        """Mean of each column over the last `fraction` of recorded steps."""
        if not self.records:
            raise ValueError("empty ledger")
        n = max(1, int(round(len(self.records) * fraction)))
        tail = self.records[-n:]
        return {f: float(np.mean([getattr(m, f) for m in tail])) for f in LEDGER_FIELDS}

    def ema(self, column: str, decay: float = 0.99) -> list[float]:
        """Display smoothing for noisy per-step columns."""
        out: list[float] = []
        value = None
        for m in self.records:
            x = getattr(m, column)
            value = x if value is None else decay * value + (1.0 - decay) * x
            out.append(value)
        return out


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    seed: int = 0
    adversarial_weight: float = 0.1   # gradient-reversal scale
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 1               # utterances per step, losses averaged
    checkpoint_every: int = 0         # 0 = final checkpoint only
    out_dir: str | None = None


@dataclass
class TrainResult:
    ledger: MetricsLedger
    checkpoint_paths: list[str]
    final_step: int


Dataset = Sequence[tuple[MelSpectrogram, int]]


def feature_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean and standard deviation over every frame in the corpus."""
    stacked = np.concatenate([mel.data for mel, _ in dataset], axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0)


def train(model: VcModel, dataset: Dataset, cfg: TrainConfig,
          checkpoint_meta: dict | None = None) -> TrainResult:
    """Run the Adam loop; deterministic given the seed.

    The same features serve as input and reconstruction target.  At step 0
    the feature statistics and the codebook are initialized from the data.
    A non-finite loss halts training after writing the last good state.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if model.step == 0:
        mean, std = feature_stats(dataset)
        model.set_feature_stats(mean, std)
        # seed the codebook from encoder outputs of the first few utterances
        seed_outputs = [model.encode(mel).values for mel, _ in dataset[:8]]
        model.codebook.init_from_outputs(np.concatenate(seed_outputs, axis=0), rng)

    optimizer = Adam(model.parameters(trainable_only=True), lr=cfg.lr)
    ledger = MetricsLedger()
    checkpoints: list[str] = []
    last_good: dict[str, np.ndarray] | None = None

    def write_checkpoint(tag: str) -> str:
        path = str(out_dir / f"step{tag}.vcck")
        save_checkpoint(model, path, extra_meta=checkpoint_meta)
        checkpoints.append(path)
        return path

    batch = max(1, cfg.batch_size)
    inv_b = 1.0 / batch
    for i in range(cfg.steps):
        step = model.step + 1
        picks = [dataset[int(rng.integers(len(dataset)))] for _ in range(batch)]

        parts = {"recon": 0.0, "codebook": 0.0, "commit": 0.0, "adv": 0.0}
        hits = 0.0
        counts = np.zeros((model.codebook.n_groups, model.codebook.n_entries), dtype=np.int64)
        with ad.Tape() as tape:
            loss = None
            for mel, speaker in picks:
                recon, qr, logits = model.forward_tensors(
                    mel, speaker, adv_weight=cfg.adversarial_weight
                )
                recon_loss = huber(Tensor(mel.data.astype(model.dtype)), recon,
                                   delta=cfg.weights.delta)
                adv_loss = ad.cross_entropy(logits, speaker)
                utt_loss = total_loss(recon_loss, qr.codebook_loss, qr.commit_loss,
                                      adv_loss, cfg.weights)
                loss = utt_loss if loss is None else ad.add(loss, utt_loss)
                parts["recon"] += recon_loss.item() * inv_b
                parts["codebook"] += qr.codebook_loss.item() * inv_b
                parts["commit"] += qr.commit_loss.item() * inv_b
                parts["adv"] += adv_loss.item() * inv_b
                hits += inv_b * (1.0 if int(np.argmax(logits.values)) == speaker else 0.0)
                counts += bn.usage_counts(qr.indices, model.codebook.n_entries)
            if batch > 1:
                loss = ad.mul(loss, Tensor(np.asarray(inv_b, dtype=loss.dtype)))
        ppl = float(np.mean([bn.perplexity(c) for c in counts]))

        if not np.isfinite(loss.values).all():
            path = None
            if last_good is not None:
                for name, values in last_good.items():
                    model.params[name].values = values
                model.step = step - 1
                if out_dir:
                    path = write_checkpoint(f"{model.step:06d}-lastgood")
            raise DivergenceError(step, path)

        last_good = {name: p.values.copy() for name, p in model.params.items()}
        optimizer.zero_grad()
        tape.backward(loss)
        optimizer.step()
        model.step = step

        model.codebook.smooth_usage(counts)
        ledger.append(StepMetrics(
            step=step,
            recon=parts["recon"],
            codebook=parts["codebook"],
            commit=parts["commit"],
            adv=parts["adv"],
            speaker_acc=hits,
            perplexity=ppl,
        ))

        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            write_checkpoint(f"{step:06d}")

    if out_dir:
        write_checkpoint("final")
        ledger.write(out_dir / "metrics.ledger")
    return TrainResult(ledger=ledger, checkpoint_paths=checkpoints, final_step=model.step)


# ---------------------------------------------------------------------------
# sweep and selection


@dataclass(frozen=True)
class CandidateMetrics:
    label: str
    speaker_acc: float
    perplexity: float
    recon: float


@dataclass
class SelectionReport:
    candidates: list[CandidateMetrics]
    criteria: dict[str, dict[str, bool]]   # label -> {"acc_ok": .., "ppl_ok": ..}
    ranking: list[str]
    selected: str | None
    fallback_used: bool
    acc_max: float
    ppl_min: float

    def lines(self) -> list[str]:
        out = [f"# selection: acc_max={self.acc_max:.9g} ppl_min={self.ppl_min:.9g}"]
        for c in self.candidates:
            flags = self.criteria[c.label]
            out.append(
                f"{c.label}\tacc={c.speaker_acc:.9g}\tppl={c.perplexity:.9g}"
                f"\trecon={c.recon:.9g}\tacc_ok={flags['acc_ok']}\tppl_ok={flags['ppl_ok']}"
            )
        out.append("ranking\t" + (",".join(self.ranking) if self.ranking else "-"))
        if self.fallback_used:
            out.append("warning\tno candidate meets criteria; fallback ranking applied")
        out.append(f"selected\t{self.selected if self.selected is not None else '-'}")
        return out


def select_model(candidates: Sequence[CandidateMetrics],
                 acc_max: float = 0.2, ppl_min: float = 64.0) -> SelectionReport:
    """Filter on speaker accuracy and perplexity, then rank by reconstruction.

    Survivors (acc <= acc_max and ppl >= ppl_min) are ranked by ascending
    reconstruction loss.  With no survivors every candidate is ranked by
    (acc ascending, recon ascending) and the report is flagged.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    criteria = {
        c.label: {"acc_ok": c.speaker_acc <= acc_max, "ppl_ok": c.perplexity >= ppl_min}
        for c in candidates
    }
    survivors = [c for c in candidates if criteria[c.label]["acc_ok"] and criteria[c.label]["ppl_ok"]]
    fallback = not survivors
    if survivors:
        ranked = sorted(survivors, key=lambda c: (c.recon, c.label))
    else:
        ranked = sorted(candidates, key=lambda c: (c.speaker_acc, c.recon, c.label))
    return SelectionReport(
        candidates=list(candidates),
        criteria=criteria,
        ranking=[c.label for c in ranked],
        selected=ranked[0].label,
        fallback_used=fallback,
        acc_max=acc_max,
        ppl_min=ppl_min,
    )


@dataclass
class SweepResult:
    ledgers: dict[str, MetricsLedger]
    report: SelectionReport


def sweep_adversarial_weight(
    weights: Sequence[float],
    model_factory: Callable[[], VcModel],
    dataset: Dataset,
    cfg: TrainConfig,
    window: float = 0.1,
    acc_max: float = 0.2,
    ppl_min: float | None = None,
) -> SweepResult:
    """One fresh training run per reversal weight, compared on final-window means."""
    if len(weights) < 2:
        raise ValueError("sweep needs at least two weights")
    ledgers: dict[str, MetricsLedger] = {}
    candidates: list[CandidateMetrics] = []
    n_entries = None
    for w in weights:
        label = format_weight(w)
        model = model_factory()
        n_entries = model.config.vq_entries
        result = train(model, dataset, replace(cfg, adversarial_weight=w, out_dir=None))
        ledgers[label] = result.ledger
        means = result.ledger.final_window_means(window)
        candidates.append(CandidateMetrics(
            label=label,
            speaker_acc=means["speaker_acc"],
            perplexity=means["perplexity"],
            recon=means["recon"],
        ))
    if ppl_min is None:
        ppl_min = n_entries / 2
    report = select_model(candidates, acc_max=acc_max, ppl_min=ppl_min)
    return SweepResult(ledgers=ledgers, report=report)


def format_weight(w: float) -> str:
    return f"{w:g}"
