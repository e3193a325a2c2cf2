"""Best-of-N evaluation of sampled futures"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from stoch_future.config_manager import RunConfig
from stoch_future.errors import InvalidInputError, ShapeError
from stoch_future.evalmetrics import (DEPTH_METRIC_NAMES, best_of_n, depth_metrics, fg_bg_eval,
                                      ged, iou, psnr, region_crop, ssim, vpq, vpq_distance)
from stoch_future.instance_tracking import instance_postprocess
from stoch_future.models import EvaluationResult, LabeledSequence, MetricReport, RolloutResult
from stoch_future.rng import make_rng
from stoch_future.ssm_residual import StateSpaceModel, elbo_and_iwae, ssm_rollout
from stoch_future.svp_ar import rollout

# (sequence, index) -> sampled futures of that sequence
Sampler = Callable[[LabeledSequence, int], List[RolloutResult]]

REGIONS = ('far', 'near')


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def model_sampler(model, config: RunConfig, horizon: Optional[int] = None,
                  n_samples: Optional[int] = None, mode: str = 'prior') -> Sampler:
    """
    Sampler drawing futures from a trained model

    Each sequence uses its own 'eval/seq/<index>' stream, so results do not
    depend on evaluation order.
    """
    horizon = horizon or config.eval_horizon
    n_samples = n_samples or config.n_samples
    k = config.k

    def sample(sequence: LabeledSequence, index: int) -> List[RolloutResult]:
        rng = make_rng(config.seed, f'eval/seq/{index}')
        cond = sequence.frames[:k]
        if isinstance(model, StateSpaceModel):
            labels = sequence.label_stack()[:k] if model.uses_labels else None
            return ssm_rollout(model, cond, horizon, n_samples, rng, labels=labels)
        future = sequence.frames[k:k + horizon] if mode == 'posterior' else None
        return rollout(model, cond, horizon, n_samples, rng, mode=mode, future=future)

    return sample


def label_heads_to_instances(labels: Dict[str, np.ndarray], config: RunConfig) -> np.ndarray:
    """Instance id maps [T, H, W] from decoded label heads"""
    return instance_postprocess(labels['label_segmentation'], labels['label_center'],
                                labels['label_offset'], labels['label_flow'],
                                threshold=config.peak_threshold,
                                separation=config.peak_separation,
                                radius=config.match_radius)


class Evaluator:
    """Computes the metric set applicable to a model kind and world"""

    def __init__(self, config: RunConfig, model=None, logger=None):
        """
        Initialize Evaluator

        Args:
            config: Resolved run configuration
            model: Trained model, needed for likelihood bounds
            logger: Optional RunLogger
        """
        self.config = config
        self.model = model
        self.logger = logger
        self._values: Dict[Tuple[str, str], Dict[int, List[float]]] = {}

    def add(self, name: str, region: str, index: int, values: Sequence[float]) -> None:
        self._values.setdefault((name, region), {})[index] = [float(v) for v in values]

    def reports(self) -> List[MetricReport]:
        """One report per (metric, region), sequences in index order"""
        result = []
        for (name, region), by_index in self._values.items():
            per_frame = [by_index[i] for i in sorted(by_index)]
            result.append(MetricReport(name, per_frame, region))
        return result

    def evaluate(self, sequences: Sequence[LabeledSequence], sampler: Sampler,
                 horizon: Optional[int] = None) -> EvaluationResult:
        """
        Sample every sequence and score the samples

        Sampling runs sequentially; scoring runs on ``config.workers``
        threads.

        Args:
            sequences: Evaluation sequences
            sampler: Produces the futures of one sequence
            horizon: Predicted frames (default ``config.eval_horizon``)

        Returns:
            EvaluationResult
        """
        horizon = horizon or self.config.eval_horizon
        needed = self.config.k + horizon
        self._values = {}
        jobs = []
        for index, sequence in enumerate(sequences):
            if sequence.length < needed:
                raise InvalidInputError(f"Sequence {index} has {sequence.length} frames, "
                                        f"k + horizon needs {needed}")
            samples = sampler(sequence, index)
            if not samples:
                raise InvalidInputError("Sampler returned no samples")
            jobs.append((index, sequence, samples))

        with ThreadPoolExecutor(max_workers=max(1, self.config.workers)) as pool:
            list(pool.map(lambda job: self.score_sequence(*job, horizon=horizon), jobs))

        for index, sequence, _ in jobs:
            self.likelihood_bounds(index, sequence, needed)

        result = EvaluationResult(reports=self.reports())
        if self.logger:
            for report in result.reports:
                self.logger.log_metric(report)
        return result

    def score_sequence(self, index: int, sequence: LabeledSequence,
                       samples: List[RolloutResult], horizon: int) -> None:
        k = self.config.k
        gt = sequence.frames[k:k + horizon]
        predictions = [s.predictions[:horizon] for s in samples]
        for prediction in predictions:
            if prediction.shape != gt.shape:
                raise ShapeError(f"prediction {prediction.shape} does not match ground truth "
                                 f"{gt.shape}")

        if sequence.world_kind == 'bev':
            self.score_bev(index, sequence, samples, horizon)
        elif gt.ndim == 4:
            self.score_frames(index, sequence, samples, horizon)
        else:
            _, _, values = best_of_n(predictions, gt, mse, 'min')
            self.add('mse', 'full', index, values)

    def score_frames(self, index: int, sequence: LabeledSequence,
                     samples: List[RolloutResult], horizon: int) -> None:
        """PSNR and SSIM best-of-N, with fg/bg split and depth metrics where available"""
        k = self.config.k
        gt = sequence.frames[k:k + horizon]
        predictions = [s.predictions[:horizon] for s in samples]
        best = {}
        for name, metric in (('psnr', psnr), ('ssim', ssim)):
            idx, _, values = best_of_n(predictions, gt, metric, 'max')
            best[name] = idx
            self.add(name, 'full', index, values)
            if sequence.fg_mask is not None:
                fg, bg = fg_bg_eval(predictions[idx], gt, sequence.fg_mask[k:k + horizon],
                                    metric, name)
                self.add(name, fg.region, index, fg.per_frame[0])
                self.add(name, bg.region, index, bg.per_frame[0])

        chosen = samples[best['psnr']]
        if sequence.depth is not None and 'depth' in chosen.intermediates:
            pred_depth = chosen.intermediates['depth'][:horizon]
            gt_depth = sequence.depth[k:k + horizon]
            per_name: Dict[str, List[float]] = {name: [] for name in DEPTH_METRIC_NAMES}
            for t in range(horizon):
                for name, value in depth_metrics(pred_depth[t], gt_depth[t]).items():
                    per_name[name].append(value)
            for name, values in per_name.items():
                self.add(f'depth_{name}', 'full', index, values)

    def score_bev(self, index: int, sequence: LabeledSequence,
                  samples: List[RolloutResult], horizon: int) -> None:
        """IoU, VPQ and GED per named horizon, near and far"""
        k = self.config.k
        gt_seg = sequence.segmentation[k:k + horizon]
        gt_ids = sequence.instance_ids[k:k + horizon]
        if any(s.labels is None for s in samples):
            raise InvalidInputError("BEV evaluation needs decoded label heads")
        seg_maps = [s.labels['label_segmentation'][:horizon] for s in samples]
        fg_maps = [(m[:, 1] > m[:, 0]) if m.ndim == 4 else m > 0 for m in seg_maps]
        id_maps = [label_heads_to_instances({n: v[:horizon] for n, v in s.labels.items()},
                                            self.config) for s in samples]

        for region in REGIONS:
            def crop(array):
                if region == 'near':
                    return region_crop(array, self.config.near_fraction)
                return array

            for name, steps in self.config.horizons.items():
                steps = min(steps, horizon)
                _, _, values = best_of_n([crop(m[:steps]) for m in fg_maps], crop(gt_seg[:steps]),
                                         iou, 'max')
                self.add(f'iou_{name}', region, index, values)

                gt_crop = crop(gt_ids[:steps])
                scores = [vpq(crop(m[:steps]), gt_crop) for m in id_maps]
                self.add(f'vpq_{name}', region, index, [max(scores)])
                if len(id_maps) >= 2:
                    value = ged([crop(m[:steps]) for m in id_maps], gt_crop, vpq_distance)
                    self.add(f'ged_{name}', region, index, [value])

    def likelihood_bounds(self, index: int, sequence: LabeledSequence, length: int) -> None:
        """ELBO and importance-weighted bound per sequence for models that support them"""
        model = self.model
        if not isinstance(model, StateSpaceModel) or model.uses_labels or model.global_latent:
            return
        rng = make_rng(self.config.seed, f'eval/likelihood/{index}')
        elbo, iwae = elbo_and_iwae(model, sequence.frames[:length], self.config.n_samples, rng)
        self.add('elbo', 'full', index, [elbo])
        self.add('iwae', 'full', index, [iwae])


def ground_truth_sampler(config: RunConfig, n_samples: int = 1,
                         horizon: Optional[int] = None) -> Sampler:
    """
    Sampler returning the ground-truth future itself

    BEV sequences also get label heads whose post-processing reproduces
    the ground-truth instances.
    """
    horizon = horizon or config.eval_horizon
    k = config.k

    def sample(sequence: LabeledSequence, index: int) -> List[RolloutResult]:
        window = slice(k, k + horizon)
        labels = None
        if sequence.has_labels:
            seg = sequence.segmentation[window].astype(np.float64)
            labels = {
                'label_segmentation': np.stack([1.0 - seg, seg], axis=1),
                'label_center': sequence.centers[window],
                'label_offset': sequence.offsets[window],
                'label_flow': sequence.future_flow[window],
            }
        return [RolloutResult(predictions=sequence.frames[window].copy(),
                              intermediates=({'depth': sequence.depth[window]}
                                             if sequence.depth is not None else {}),
                              labels=labels)
                for _ in range(n_samples)]

    return sample


def seconds_per_frame(model, config: RunConfig, sequence: LabeledSequence, horizon: int,
                      clock: Callable[[], float]) -> float:
    """Wall-clock seconds per predicted frame for one sample of ``sequence``"""
    sampler = model_sampler(model, config, horizon=horizon, n_samples=1)
    start = clock()
    sampler(sequence, 0)
    return (clock() - start) / float(horizon)
