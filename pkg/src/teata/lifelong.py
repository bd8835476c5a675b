"""Domain-stream orchestration: per-domain two-stage training, the
sequential-fine-tuning and joint-training baselines, checkpointing, resume,
and per-step evaluation snapshots.

Stage 1 freezes both encoders and distills the current domain's image
features into the prompt tokens with the bidirectional contrastive loss.
Stage 2 snapshots the text table, initializes the adapted classifier from it
(or from image prototypes), and trains the image encoder plus classifiers
under the slow-paced plan. Train data of a finished domain is never read
again; an access audit enforces this.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, dump_toml
from .data import (
    BatchSpec,
    DataAccessAudit,
    DomainDataset,
    load_domain,
    merge_domains,
    pk_batch_indices,
    sample_pk_batches,
)
from .encoders import ContrastiveTemperature, ImageEncoder, TextEncoder, freeze, unfreeze
from .errors import ConfigError, InvalidArgument
from .evaluation import aggregate, evaluate_domain
from .kap import (
    AdaptedClassifier,
    SlowPacedSchedule,
    image_prototypes,
    init_classifier,
    stage1_learning_rate,
    stage2_learning_rate,
    stage2_prompt_tuning_hook,
)
from .losses import LossWeights, Stage2Terms, contrastive_alignment, id_loss, proj_loss, \
    stage2_total, triplet_loss
from .prompts import StructuredPromptStore

METHODS = ("TEATA", "SFT", "JOINT")


def derive_seed(base: int, *parts) -> int:
    """Stable 32-bit sub-seed for a named part of the run."""
    text = f"{base}|" + "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


@dataclass
class Stage1Result:
    losses: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)


@dataclass
class Stage2Result:
    losses: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    frozen_table: Optional[torch.Tensor] = None
    classifier_init: Optional[torch.Tensor] = None


@dataclass
class StepResult:
    step: int
    domain: str
    checkpoint_dir: Optional[Path]
    reports: dict[str, dict] = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)
    stage1: Optional[Stage1Result] = None
    stage2: Optional[Stage2Result] = None


@dataclass
class TrainState:
    config: RunConfig
    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    temperature: ContrastiveTemperature
    prompts: StructuredPromptStore
    audit: DataAccessAudit
    classifiers: dict[int, AdaptedClassifier] = field(default_factory=dict)
    pre_classifiers: dict[int, AdaptedClassifier] = field(default_factory=dict)

    def schedule(self) -> SlowPacedSchedule:
        t = self.config.train
        return SlowPacedSchedule(
            stage1_base_lr=t.stage1_lr,
            stage2_warmup_start=t.stage2_warmup_start,
            stage2_peak_lr=t.stage2_peak_lr,
            stage2_warmup_epochs=t.stage2_warmup_epochs,
            stage2_decay_epoch=t.stage2_decay_epoch,
            stage2_decay_factor=t.stage2_decay_factor,
            slow_factor=t.slow_factor,
        )

    def batch_spec(self) -> BatchSpec:
        t = self.config.train
        return BatchSpec(t.batch_size, t.instances_per_identity)

    def loss_weights(self, use_text: bool) -> LossWeights:
        t = self.config.train
        return LossWeights(
            lambda1=t.lambda1 if use_text else 0.0,
            lambda2=t.lambda2,
            lambda3=t.lambda3,
            epsilon=t.epsilon,
            triplet_margin=t.triplet_margin,
        )


def build_state(config: RunConfig, audit: Optional[DataAccessAudit] = None) -> TrainState:
    model = config.model
    image_encoder = ImageEncoder(
        image_height=model.image_height,
        image_width=model.image_width,
        patch_size=model.patch_size,
        pre_dim=model.pre_dim,
        embed_dim=model.embed_dim,
        depth=model.depth,
        heads=model.heads,
        seed=model.init_seed,
        init_std=model.init_std,
    )
    text_encoder = TextEncoder(
        num_pairs=model.num_pairs,
        token_width=model.token_width,
        embed_dim=model.embed_dim,
        depth=model.text_depth,
        heads=model.heads,
        seed=model.init_seed + 1,
        init_std=model.init_std,
    )
    state = TrainState(
        config=config,
        image_encoder=image_encoder,
        text_encoder=text_encoder,
        temperature=ContrastiveTemperature(),
        prompts=StructuredPromptStore(model.num_pairs, model.token_width),
        audit=audit if audit is not None else DataAccessAudit(),
    )
    if model.pretrained_checkpoint:
        _, tensors = load_checkpoint(model.pretrained_checkpoint)
        load_state_tensors(state, tensors, strict=False)
    return state


# ---------------------------------------------------------------------------
# State serialization
# ---------------------------------------------------------------------------

def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for name, param in state.image_encoder.named_parameters():
        out[f"image_encoder.{name}"] = param
    for name, param in state.text_encoder.named_parameters():
        out[f"text_encoder.{name}"] = param
    out["temperature.logit_scale"] = state.temperature.logit_scale
    out.update(state.prompts.named_tensors())
    for step, clf in state.classifiers.items():
        out[f"kap.step{step}.classifier"] = clf.weight
    for step, clf in state.pre_classifiers.items():
        out[f"kap.step{step}.pre_classifier"] = clf.weight
    return out


def load_state_tensors(
    state: TrainState, tensors: dict[str, torch.Tensor], strict: bool = True
) -> None:
    """Restore encoders, temperature, prompts, and classifiers from a
    checkpoint tensor map; with strict=False only matching names load
    (the pretrained-weights adapter path)."""
    prefixes = {"image_encoder.": state.image_encoder, "text_encoder.": state.text_encoder}
    for prefix, module in prefixes.items():
        subset = {
            name[len(prefix):]: value for name, value in tensors.items()
            if name.startswith(prefix)
        }
        if subset:
            module.load_state_dict(subset, strict=strict)
    if "temperature.logit_scale" in tensors:
        with torch.no_grad():
            state.temperature.logit_scale.copy_(tensors["temperature.logit_scale"])

    if "prompts.shared" in tensors:
        state.prompts.shared = torch.nn.Parameter(tensors["prompts.shared"].clone())
    for name, value in sorted(tensors.items()):
        if name.startswith("prompts.step") and name.endswith(".specific"):
            step = name[len("prompts.step"):-len(".specific")]
            state.prompts.specific[step] = torch.nn.Parameter(value.clone())
        elif name.startswith("kap.step") and name.endswith(".classifier"):
            step = int(name[len("kap.step"):-len(".classifier")])
            state.classifiers[step] = AdaptedClassifier(
                value.clone(), init_mode=state.config.train.init_mode
            )
        elif name.startswith("kap.step") and name.endswith(".pre_classifier"):
            step = int(name[len("kap.step"):-len(".pre_classifier")])
            state.pre_classifiers[step] = AdaptedClassifier(value.clone(), init_mode="RANDOM")


# ---------------------------------------------------------------------------
# Stage 1: image -> text distillation into prompt tokens
# ---------------------------------------------------------------------------

def run_stage1(
    state: TrainState,
    dataset: DomainDataset,
    step: int,
    epochs: int,
    log: Optional["RunLog"] = None,
) -> Stage1Result:
    """Optimize the current domain's prompt tokens (and the shared tokens and
    temperature) against frozen encoders. Image features are extracted once
    up front; the freeze contract keeps them valid all stage."""
    freeze(state.image_encoder)
    freeze(state.text_encoder)
    for param in state.prompts.stage1_parameters(step):
        param.requires_grad_(True)
    state.temperature.logit_scale.requires_grad_(True)

    result = Stage1Result()
    if epochs == 0:
        return result

    train_cfg = state.config.train
    schedule = state.schedule()
    spec = state.batch_spec()

    train_indices = [i for i, r in enumerate(dataset.records) if r.split == "train"]
    row_of = {record_index: row for row, record_index in enumerate(train_indices)}
    chunks = []
    with torch.no_grad():
        for start in range(0, len(train_indices), 64):
            recs = [dataset.records[i] for i in train_indices[start : start + 64]]
            images = dataset.load_images(recs, audit=state.audit)
            _, feats = state.image_encoder(torch.from_numpy(images))
            chunks.append(feats)
    feature_cache = torch.cat(chunks, dim=0)

    params = state.prompts.stage1_parameters(step) + [state.temperature.logit_scale]
    optimizer = torch.optim.AdamW(params, lr=schedule.stage1_base_lr,
                                  weight_decay=train_cfg.weight_decay)
    seed = derive_seed(train_cfg.seed, "stage1", step)
    for epoch in range(epochs):
        lr = stage1_learning_rate(schedule, epoch, epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_loss = 0.0
        batches = pk_batch_indices(dataset, spec, seed, epoch)
        for batch in batches:
            rows = torch.tensor([row_of[i] for i in batch])
            labels = torch.tensor([dataset.records[i].identity for i in batch])
            table = state.prompts.text_table(state.text_encoder, step)
            loss_i2t, loss_t2i = contrastive_alignment(
                feature_cache[rows], table, labels, state.temperature.temperature()
            )
            loss = loss_i2t + loss_t2i
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
        result.losses.append(epoch_loss / len(batches))
        result.lr_trace.append(lr)
        if log:
            log.write(event="stage1_epoch", step=step, epoch=epoch, lr=lr,
                      loss=result.losses[-1])
    return result


# ---------------------------------------------------------------------------
# Stage 2: text -> image guidance with the slow-paced learner
# ---------------------------------------------------------------------------

def run_stage2(
    state: TrainState,
    dataset: DomainDataset,
    step: int,
    domain_index: int,
    epochs: int,
    use_text: bool = True,
    slow: bool = True,
    log: Optional["RunLog"] = None,
) -> Stage2Result:
    """Train the image encoder, the adapted classifier, and the
    pre-projection classifier on the current domain. The text encoder stays
    frozen; prompts join the slow-paced group only when prompt tuning is on."""
    train_cfg = state.config.train
    schedule = state.schedule()
    spec = state.batch_spec()
    weights = state.loss_weights(use_text)

    freeze(state.text_encoder)
    unfreeze(state.image_encoder)
    state.temperature.logit_scale.requires_grad_(False)

    result = Stage2Result()
    prompt_params: list[torch.nn.Parameter] = []
    if use_text:
        with torch.no_grad():
            frozen_table = state.prompts.text_table(state.text_encoder, step).detach().clone()
        result.frozen_table = frozen_table
        if train_cfg.init_mode == "KA_V":
            prototypes = image_prototypes(
                state.image_encoder, dataset, audit=state.audit
            )
            classifier = init_classifier("KA_V", image_prototypes=prototypes)
        elif train_cfg.init_mode == "KA_T":
            classifier = init_classifier("KA_T", text_table=frozen_table)
        else:
            classifier = init_classifier(
                "RANDOM",
                num_identities=dataset.num_identities,
                embed_dim=state.config.model.embed_dim,
                seed=derive_seed(train_cfg.seed, "classifier", step),
            )
        prompt_params = stage2_prompt_tuning_hook(
            state.prompts, step, train_cfg.prompt_tuning, train_cfg.prompt_tokens
        )
    else:
        frozen_table = None
        classifier = init_classifier(
            "RANDOM",
            num_identities=dataset.num_identities,
            embed_dim=state.config.model.embed_dim,
            seed=derive_seed(train_cfg.seed, "classifier", step),
        )
    pre_classifier = init_classifier(
        "RANDOM",
        num_identities=dataset.num_identities,
        embed_dim=state.config.model.pre_dim,
        seed=derive_seed(train_cfg.seed, "pre_classifier", step),
    )
    result.classifier_init = classifier.weight.detach().clone()

    optimizer = torch.optim.AdamW(
        [
            {"params": list(state.image_encoder.parameters())},
            {"params": [classifier.weight, pre_classifier.weight] + prompt_params},
        ],
        lr=0.0,
        weight_decay=train_cfg.weight_decay,
    )
    seed = derive_seed(train_cfg.seed, "stage2", step)
    for epoch in range(epochs):
        head_lr = stage2_learning_rate(schedule, domain_index if slow else 1, epoch)
        encoder_lr = stage2_learning_rate(
            schedule, domain_index if (slow and train_cfg.slow_pace_encoder) else 1, epoch
        )
        optimizer.param_groups[0]["lr"] = encoder_lr
        optimizer.param_groups[1]["lr"] = head_lr
        result.lr_trace.append(head_lr)

        epoch_loss = 0.0
        batch_count = 0
        for images, labels in sample_pk_batches(
            dataset, spec, seed, epoch, audit=state.audit, augment=train_cfg.augment
        ):
            image_batch = torch.from_numpy(images)
            label_batch = torch.from_numpy(labels)
            pre_feats, feats = state.image_encoder(image_batch)
            if not use_text:
                projection = feats.sum() * 0.0
            elif prompt_params:
                # Prompt tuning: project against the live table so gradient
                # reaches the tokens through the frozen text encoder.
                live_table = state.prompts.text_table(state.text_encoder, step)
                projection = id_loss(feats, live_table, label_batch, weights.epsilon)
            else:
                projection = proj_loss(feats, frozen_table, label_batch, weights.epsilon)
            terms = Stage2Terms(
                proj=projection,
                id_pre=id_loss(pre_feats, pre_classifier.weight, label_batch, weights.epsilon),
                id_proj=id_loss(feats, classifier.weight, label_batch, weights.epsilon),
                tri_pre=triplet_loss(pre_feats, label_batch, weights.triplet_margin),
                tri_proj=triplet_loss(feats, label_batch, weights.triplet_margin),
            )
            loss = stage2_total(terms, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batch_count += 1
        result.losses.append(epoch_loss / max(batch_count, 1))
        if log:
            log.write(event="stage2_epoch", step=step, epoch=epoch, lr=head_lr,
                      encoder_lr=encoder_lr, loss=result.losses[-1])

    state.classifiers[step] = classifier
    state.pre_classifiers[step] = pre_classifier
    return result


# ---------------------------------------------------------------------------
# Plan runner
# ---------------------------------------------------------------------------

class RunLog:
    """Append-only JSON-lines event log (no timestamps; runs stay
    byte-comparable)."""

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **event) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def _load_plan_datasets(config: RunConfig) -> tuple[list[DomainDataset], list[DomainDataset]]:
    root = Path(config.data.root)
    if not config.data.domains:
        raise ConfigError("data.domains lists no training domains")
    seen = [load_domain(root / name) for name in config.data.domains]
    unseen = [load_domain(root / name) for name in config.data.unseen]
    return seen, unseen


def evaluate_step(
    state: TrainState,
    seen: list[DomainDataset],
    unseen: list[DomainDataset],
) -> tuple[dict[str, dict], dict]:
    override = state.config.eval.protocol_override or None
    max_rank = state.config.eval.max_rank
    reports: dict[str, dict] = {}
    rows = []
    for dataset, is_seen in [(d, True) for d in seen] + [(d, False) for d in unseen]:
        report = evaluate_domain(
            state.image_encoder, dataset, override, max_rank=max_rank, audit=state.audit
        )
        report["seen"] = is_seen
        report["clothing_state"] = dataset.clothing_state
        reports[dataset.name] = report
        rows.append(report)
    aggregates = aggregate(rows)
    aggregates["training_flags"] = {
        "method": state.config.train.method,
        "init_mode": state.config.train.init_mode,
        "prompt_tuning": state.config.train.prompt_tuning,
        "prompt_tokens": state.config.train.prompt_tokens,
    }
    return reports, aggregates


def _write_reports(step_dir: Path, reports: dict[str, dict], aggregates: dict) -> None:
    reports_dir = step_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    for name, report in reports.items():
        (reports_dir / f"{name}.json").write_text(json.dumps(report, indent=2) + "\n")
    (reports_dir / "aggregate.json").write_text(json.dumps(aggregates, indent=2) + "\n")


def run_plan(
    config: RunConfig,
    run_dir: str | Path,
    resume: bool = False,
    audit: Optional[DataAccessAudit] = None,
) -> list[StepResult]:
    """Execute the full lifelong plan and return one StepResult per step.

    TEATA runs stage 1 + stage 2 per domain; SFT runs stage-2-style training
    without text losses at the first-domain pace; JOINT merges every train
    split into one offset-labelled run. With resume=True, steps whose
    checkpoints already exist are loaded instead of retrained. A caller may
    pass its own access audit to inspect the read log afterwards.
    """
    if config.train.method not in METHODS:
        raise InvalidArgument(f"unknown method {config.train.method!r}")
    if config.train.deterministic:
        torch.set_num_threads(1)

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = dump_toml(config)
    config_path = run_dir / "config.toml"
    if config_path.exists() and resume:
        if config_path.read_text() != resolved:
            raise ConfigError(f"{config_path} does not match the resumed configuration")
    else:
        config_path.write_text(resolved)

    log = RunLog(run_dir / "log.jsonl")
    if audit is None:
        audit = DataAccessAudit()
    state = build_state(config, audit)
    seen, unseen = _load_plan_datasets(config)
    digest = config_hash(config)
    method = config.train.method

    if method == "JOINT":
        plan: list[tuple[int, DomainDataset, list[DomainDataset]]] = [
            (1, merge_domains(seen), seen)
        ]
    else:
        plan = [(t, ds, seen[:t]) for t, ds in enumerate(seen, start=1)]

    results: list[StepResult] = []
    for step, train_ds, seen_so_far in plan:
        step_dir = run_dir / f"step{step}"
        ckpt_dir = step_dir / "checkpoint"
        if resume and (ckpt_dir / "checkpoint.json").is_file():
            meta, tensors = load_checkpoint(ckpt_dir)
            if meta.get("config_hash") != digest:
                raise ConfigError(
                    f"checkpoint at {ckpt_dir} was produced by a different configuration"
                )
            load_state_tensors(state, tensors)
            _complete_domains(audit, method, train_ds)
            reports, aggregates = _read_reports(step_dir)
            results.append(
                StepResult(step=step, domain=train_ds.name, checkpoint_dir=ckpt_dir,
                           reports=reports, aggregates=aggregates)
            )
            log.write(event="step_resumed", step=step, domain=train_ds.name)
            continue

        stage1 = None
        if method == "TEATA":
            state.prompts.init_domain_prompts(
                step, train_ds.num_identities,
                derive_seed(config.train.seed, "prompts", step),
            )
            stage1 = run_stage1(state, train_ds, step, config.train.stage1_epochs, log)
            stage2 = run_stage2(
                state, train_ds, step, domain_index=step,
                epochs=config.train.stage2_epochs, use_text=True, slow=True, log=log,
            )
        else:
            stage2 = run_stage2(
                state, train_ds, step, domain_index=step,
                epochs=config.train.stage2_epochs, use_text=False, slow=False, log=log,
            )
        _complete_domains(audit, method, train_ds)

        save_checkpoint(ckpt_dir, state_tensors(state), config_hash=digest, domain_step=step)
        result = StepResult(
            step=step, domain=train_ds.name, checkpoint_dir=ckpt_dir,
            stage1=stage1, stage2=stage2,
        )
        if config.train.eval_after_each_step or step == plan[-1][0]:
            result.reports, result.aggregates = evaluate_step(state, seen_so_far, unseen)
            _write_reports(step_dir, result.reports, result.aggregates)
        log.write(event="step_complete", step=step, domain=train_ds.name)
        results.append(result)
    return results


def _complete_domains(audit: DataAccessAudit, method: str, train_ds: DomainDataset) -> None:
    if method == "JOINT":
        # The merged set reads under the source domains' names.
        for ds, _ in {id(v[0]): v for v in getattr(train_ds, "sources", {}).values()}.values():
            audit.complete_train(ds.name)
    else:
        audit.complete_train(train_ds.name)


def _read_reports(step_dir: Path) -> tuple[dict[str, dict], dict]:
    reports_dir = step_dir / "reports"
    reports: dict[str, dict] = {}
    aggregates: dict = {}
    if reports_dir.is_dir():
        for path in sorted(reports_dir.glob("*.json")):
            payload = json.loads(path.read_text())
            if path.stem == "aggregate":
                aggregates = payload
            else:
                reports[payload["domain"]] = payload
    return reports, aggregates
