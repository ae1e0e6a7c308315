"""
Video Temporal Grounding Agent
Main agent class that wires the tools into the full pipeline
(frontend -> aligner -> refiner -> heads) and runs training, evaluation and inspection
"""

import logging
import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from exceptions import DimensionError, FreezeViolationError, LoadError, NumericError, ValidationError
from models import EvalRecord, ForwardResult, GroundingSample, LossBreakdown, PredictionSet, RunConfig
from tools.aligner import MambaAligner
from tools.container import (
    CHECKPOINT_VERSION,
    NO_ARCHITECTURE,
    Container,
    ContainerSection,
    read_container,
    write_container,
)
from tools.frontend import FrontendProjector
from tools.heads import HighlightHead, TemporalHead, batch_total_loss, decode_spans, hd_head, tl_head
from tools.metrics import evaluate_records
from tools.numerics import ParameterGroup, no_grad, set_default_dtype
from tools.optimizer import AdamOptimizer
from tools.refiner import (
    BlockArchitecture,
    FrozenBlock,
    LLMRefiner,
    load_frozen_block,
    make_surrogate_block,
    verify_frozen,
)
from tools.report_generator import ReportGeneratorTool

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.mlvg"
FROZEN_PREFIX = "refiner.llm."
OPTIMIZER_PREFIX = "adam."
SURROGATE_SEED = 0

COMPONENT_VARIANTS = {
    "neither": {"use_aligner": False, "use_refiner": False},
    "aligner_only": {"use_aligner": True, "use_refiner": False},
    "refiner_only": {"use_aligner": False, "use_refiner": True},
    "full": {"use_aligner": True, "use_refiner": True},
}
REFINER_VARIANTS = {
    "no_refiner": {"use_refiner": False},
    "random_unfrozen": {"use_refiner": True, "refiner_init": "random", "refiner_frozen": False},
    "random_frozen": {"use_refiner": True, "refiner_init": "random", "refiner_frozen": True},
    "pretrained_unfrozen": {"use_refiner": True, "refiner_init": "pretrained", "refiner_frozen": False},
    "pretrained_frozen": {"use_refiner": True, "refiner_init": "pretrained", "refiner_frozen": True},
}


def cosine_matrix(rows: np.ndarray, columns: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; pairs involving a zero vector score 0"""
    def normalize(matrix):
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)

    return normalize(np.asarray(rows, dtype=float)) @ normalize(np.asarray(columns, dtype=float)).T


class VideoGroundingAgent:
    """
    Grounding pipeline with its optimizer state
    One agent owns one set of weights; training mutates them in place
    """

    def __init__(self, config: RunConfig, frozen_block: Optional[FrozenBlock] = None):
        """
        Build every component from the run configuration

        Args:
            config: Validated run configuration
            frozen_block: Pre-loaded frozen block; otherwise taken from config.frozen_block_path
                or generated as a seeded surrogate
        """
        config.validate()
        self.config = config
        set_default_dtype(config.dtype)
        rng = np.random.default_rng(config.seed)

        self.model = ParameterGroup()
        self.frontend = self.model.add_child(
            "frontend",
            FrontendProjector(
                config.video_dim, config.query_dim, config.d_model, rng,
                max_len=config.max_len, activation=config.ffn_activation, rate=config.dropout,
            ),
        )
        self.aligner: Optional[MambaAligner] = None
        if config.use_aligner:
            self.aligner = self.model.add_child(
                "aligner",
                MambaAligner(
                    config.d_model, config.d_inner, config.num_blocks, config.ssm_state, rng,
                    conv_width=config.conv_width, ssm_mode=config.ssm_mode, gate=config.gate,
                ),
            )
        self.refiner: Optional[LLMRefiner] = None
        if config.use_refiner:
            block = frozen_block if frozen_block is not None else self._frozen_block(rng)
            if block.d_llm != config.d_llm:
                raise LoadError(f"Frozen block has d_llm={block.d_llm}, config expects {config.d_llm}")
            self.refiner = self.model.add_child(
                "refiner",
                LLMRefiner(config.d_model, block, rng, residual=config.refiner_residual, frozen=config.refiner_frozen),
            )
        self.tl_params = self.model.add_child("tl_head", TemporalHead(config.d_model, rng, config.head_conv_width))
        self.hd_params = self.model.add_child("hd_head", HighlightHead())

        self.optimizer = AdamOptimizer(
            self.model.named_parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
        )
        self.epoch = 0
        self.step = 0
        self.skipped_tl = 0
        logger.info(
            f"VideoGroundingAgent initialized (aligner={config.use_aligner}, refiner={config.use_refiner}, "
            f"trainable={sum(p.size for p in self.model.trainable_parameters())} values)"
        )

    def _frozen_block(self, rng: np.random.Generator) -> FrozenBlock:
        config = self.config
        architecture = BlockArchitecture(config.llm_architecture)
        if config.refiner_init == "random":
            return make_surrogate_block(
                config.d_llm, config.llm_layer_index, architecture, seed=int(rng.integers(2 ** 31))
            )
        if config.frozen_block_path:
            return load_frozen_block(config.frozen_block_path, expected_dims=config.d_llm)
        logger.warning("No frozen_block_path configured, using the seeded surrogate block")
        return make_surrogate_block(config.d_llm, config.llm_layer_index, architecture, seed=SURROGATE_SEED)

    # ----- inference -----

    def check_compatible(self, samples: Sequence[GroundingSample]) -> None:
        for sample in samples:
            widths = (sample.video_features.shape[1], sample.query_features.shape[1])
            if widths != (self.config.video_dim, self.config.query_dim):
                raise LoadError(
                    f"{sample.sample_id}: feature widths video={widths[0]}, query={widths[1]} do not match "
                    f"the model's video_dim={self.config.video_dim}, query_dim={self.config.query_dim}"
                )

    def forward(
        self,
        sample: GroundingSample,
        rng: Optional[np.random.Generator] = None,
        keep_taps: bool = False,
    ) -> ForwardResult:
        """
        Run the pipeline on one sample

        Args:
            sample: Video/query pair
            rng: Dropout generator; None disables dropout
            keep_taps: Record (query rows, video rows) after projection, aligner and refiner
        """
        tokens, V, Q = self.frontend(sample.video_features, sample.query_features, rng)
        boundary = tokens.boundary
        taps: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        if keep_taps:
            taps["projection"] = (Q.data.copy(), V.data.copy())

        Z = self.aligner(tokens.Z) if self.aligner is not None else tokens.Z
        if keep_taps:
            taps["aligner"] = (Z.data[:boundary].copy(), Z.data[boundary:].copy())
        Z = self.refiner(Z) if self.refiner is not None else Z
        if keep_taps:
            taps["refiner"] = (Z.data[:boundary].copy(), Z.data[boundary:].copy())

        return ForwardResult(
            tl=tl_head(self.tl_params, Z, boundary),
            hd=hd_head(self.hd_params, V, tokens.S),
            video=V,
            sentence=tokens.S,
            boundary=boundary,
            taps=taps,
        )

    def predict(self, sample: GroundingSample) -> PredictionSet:
        with no_grad():
            result = self.forward(sample)
        spans = decode_spans(result.tl, top_k=self.config.top_k, nms_iou=self.config.nms_iou)
        return PredictionSet(sample_id=sample.sample_id, spans=spans, saliency=result.hd.saliency.data.copy())

    def evaluate(self, samples: Sequence[GroundingSample]) -> Tuple[Dict[str, float], List[PredictionSet]]:
        """Predict every sample and compute the full metric report"""
        self.check_compatible(samples)
        predictions = [self.predict(sample) for sample in samples]
        records = [
            EvalRecord(
                query_id=sample.sample_id,
                predictions=prediction.spans,
                gt_spans=list(sample.gt_spans),
                gt_saliency=list(sample.gt_saliency),
                pred_saliency=[float(value) for value in prediction.saliency],
            )
            for sample, prediction in zip(samples, predictions)
        ]
        return evaluate_records(records, self.config.very_good_threshold), predictions

    def inspect(self, sample: GroundingSample) -> Dict[str, np.ndarray]:
        """L_q x L_v query/clip cosine matrices after projection, aligner and refiner"""
        with no_grad():
            result = self.forward(sample, keep_taps=True)
        return {name: cosine_matrix(query, video) for name, (query, video) in result.taps.items()}

    # ----- training -----

    def batch_loss(self, samples: Sequence[GroundingSample], rng: Optional[np.random.Generator] = None) -> LossBreakdown:
        results = [self.forward(sample, rng) for sample in samples]
        return batch_total_loss(
            results,
            samples,
            self.config.loss_weights,
            margin=self.config.intra_margin,
            temperature=self.config.inter_temperature,
        )

    def train_step(self, samples: Sequence[GroundingSample]) -> LossBreakdown:
        """One optimizer update on a batch; dropout is seeded by (seed, step)"""
        rng = np.random.default_rng([self.config.seed, self.step])
        self.optimizer.zero_grad()
        loss = self.batch_loss(samples, rng)
        if not np.isfinite(loss.total.data):
            raise NumericError("Training loss became non-finite", step=self.step)
        loss.total.backward()
        self.optimizer.step()
        self.step += 1
        self.skipped_tl += loss.skipped_tl
        return loss

    def batches(self, count: int, epoch: int) -> List[np.ndarray]:
        order = np.random.default_rng([self.config.seed, epoch]).permutation(count)
        size = self.config.batch_size
        return [order[start:start + size] for start in range(0, count, size)]

    def verify_frozen(self) -> bool:
        """True iff the refiner block still matches its recorded checksum; callers decide whether a mismatch is fatal"""
        if self.refiner is None:
            return True
        return verify_frozen(self.refiner.block)

    def train(
        self,
        samples: Sequence[GroundingSample],
        out_dir: str,
        report: Optional[ReportGeneratorTool] = None,
        resume: bool = False,
        show_progress: bool = True,
    ) -> Dict[str, object]:
        """
        Train until config.epochs, checkpointing after every epoch

        A non-finite loss aborts the run; the checkpoint of the last completed epoch stays on disk.

        Returns:
            Summary with the first/last step loss, the step count and the checkpoint path
        """
        if not samples:
            raise ValidationError("Training needs at least one sample")
        self.check_compatible(samples)
        for sample in samples:
            sample.validate()
        report = report or ReportGeneratorTool(out_dir)
        checkpoint = os.path.join(out_dir, CHECKPOINT_FILE)
        log_path = report.start_train_log(resume=resume)
        if not resume or not os.path.exists(checkpoint):
            self.save_checkpoint(checkpoint)
        report.record(checkpoint)

        first_loss = last_loss = None
        epochs = range(self.epoch, self.config.epochs)
        for epoch in tqdm(epochs, desc="epochs", disable=not show_progress):
            for batch in self.batches(len(samples), epoch):
                try:
                    loss = self.train_step([samples[i] for i in batch])
                except NumericError:
                    logger.error(f"Numeric failure at step {self.step}; last good checkpoint kept at {checkpoint}")
                    raise
                row = loss.as_row(self.step)
                report.append_train_row(log_path, row)
                first_loss = row["total"] if first_loss is None else first_loss
                last_loss = row["total"]

            if self.config.refiner_frozen and not self.verify_frozen():
                raise FreezeViolationError(f"Frozen block weights changed during epoch {epoch}")
            self.epoch = epoch + 1
            self.save_checkpoint(checkpoint)

        if self.skipped_tl:
            logger.warning(f"{self.skipped_tl} sample passes had no foreground clip")
        logger.info(f"Training finished at epoch {self.epoch}, step {self.step}")
        return {"epochs": self.epoch, "steps": self.step, "first_loss": first_loss, "last_loss": last_loss, "checkpoint": checkpoint}

    # ----- checkpoints -----

    def save_checkpoint(self, path: str) -> None:
        """Every parameter (trainable flag kept), optimizer moments and the run metadata"""
        sections = [
            ContainerSection(name, parameter.data, trainable=not parameter.frozen)
            for name, parameter in self.model.named_parameters()
        ]
        sections.extend(ContainerSection(name, np.atleast_1d(value)) for name, value in self.optimizer.state_dict().items())
        block = self.refiner.block if self.refiner is not None else None
        metadata = {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "frozen_checksum": block.recorded_checksum if block is not None else None,
        }
        write_container(
            path,
            Container(
                CHECKPOINT_VERSION,
                block.architecture.tag if block is not None else NO_ARCHITECTURE,
                block.d_llm if block is not None else 0,
                block.layer_index if block is not None else 0,
                sections,
                metadata,
            ),
        )

    @classmethod
    def load_checkpoint(cls, path: str, overrides: Optional[Dict[str, object]] = None) -> "VideoGroundingAgent":
        """
        Rebuild an agent from a checkpoint, frozen block included

        Args:
            path: Checkpoint container (version 2)
            overrides: RunConfig fields to replace, e.g. a longer epoch count when resuming
        """
        if not os.path.exists(path):
            raise LoadError(f"Checkpoint not found: {path}")
        container = read_container(path)
        if container.version != CHECKPOINT_VERSION or "config" not in container.metadata:
            raise LoadError(f"{path} is not a training checkpoint")
        config = RunConfig.from_dict(container.metadata["config"])
        if overrides:
            config = replace(config, **overrides)
            config.validate()
        set_default_dtype(config.dtype)

        arrays = container.arrays()
        block = None
        if config.use_refiner:
            block_arrays = {k[len(FROZEN_PREFIX):]: v for k, v in arrays.items() if k.startswith(FROZEN_PREFIX)}
            block = FrozenBlock(
                block_arrays,
                container.d_llm,
                container.layer_index,
                BlockArchitecture.from_tag(container.architecture_tag),
            )
            recorded = container.metadata.get("frozen_checksum")
            if config.refiner_frozen and recorded and block.recorded_checksum != recorded:
                raise FreezeViolationError(f"Frozen block stored in {path} differs from the one it was trained with")

        agent = cls(config, frozen_block=block)
        optimizer_state = {k: v for k, v in arrays.items() if k.startswith(OPTIMIZER_PREFIX)}
        model_state = {k: v for k, v in arrays.items() if not k.startswith(OPTIMIZER_PREFIX)}
        try:
            agent.model.load_state_dict(model_state)
        except DimensionError as exc:
            raise LoadError(f"Checkpoint {path} does not fit its own configuration: {exc}") from exc
        optimizer_state["adam.step"] = optimizer_state.get("adam.step", np.zeros(1)).reshape(())
        agent.optimizer.load_state_dict(optimizer_state)
        agent.epoch = int(container.metadata.get("epoch", 0))
        agent.step = int(container.metadata.get("step", 0))
        logger.info(f"Loaded checkpoint {path} (epoch {agent.epoch}, step {agent.step})")
        return agent


def ablate(
    base: RunConfig,
    samples: Sequence[GroundingSample],
    seeds: Sequence[int],
    out_dir: str,
    study: str = "components",
    show_progress: bool = False,
) -> Dict[str, Dict[str, float]]:
    """
    Train and evaluate pipeline variants over several seeds

    Args:
        base: Configuration shared by every variant
        samples: Training set, also used for evaluation
        seeds: Run seeds; metrics are averaged over them
        out_dir: Per-variant, per-seed run directories are created below it
        study: "components" (aligner/refiner on or off) or "refiner" (init and freezing)

    Returns:
        Variant name -> averaged metric report
    """
    variants = {"components": COMPONENT_VARIANTS, "refiner": REFINER_VARIANTS}.get(study)
    if variants is None:
        raise ValidationError(f"Unknown ablation study {study!r}")
    if not seeds:
        raise ValidationError("Ablation needs at least one seed")

    results: Dict[str, Dict[str, float]] = {}
    for name, changes in variants.items():
        reports = []
        for seed in seeds:
            config = replace(base, seed=int(seed), **changes)
            run_dir = os.path.join(out_dir, name, f"seed{seed}")
            agent = VideoGroundingAgent(config)
            agent.train(samples, run_dir, show_progress=show_progress)
            metrics, _ = agent.evaluate(samples)
            reports.append(metrics)
        results[name] = {key: float(np.mean([r[key] for r in reports])) for key in reports[0]}
        logger.info(f"Ablation {name}: R1@0.7={results[name]['r1@0.7']:.3f} HIT@1={results[name]['hit@1']:.3f}")
    return results
