"""Main application controller for Stoch-Future"""

import argparse
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import numpy as np

from stoch_future import tensorcore as tc
from stoch_future.checkpoint import load_checkpoint, restore_into
from stoch_future.config_manager import ConfigManager, RunConfig
from stoch_future.errors import ConfigError, NumericalError, exit_code_for
from stoch_future.evaluation import Evaluator, label_heads_to_instances, model_sampler
from stoch_future.gradcheck import run_gradchecks
from stoch_future.imageio import (frame_to_2d, instance_map_to_gray, read_array, tile_frames,
                                  write_array, write_pgm, write_sequence_preview)
from stoch_future.logger import create_logger
from stoch_future.models import RunState
from stoch_future.report_exporter import ReportExporter
from stoch_future.synthworlds import load_dataset, write_dataset
from stoch_future.training import CHECKPOINT_NAME, TRACE_NAME, Trainer, model_for_dataset
from stoch_future.version import __author__, __version__

COMMANDS = ('gen-data', 'train', 'eval', 'sample', 'gradcheck', 'plot')
PREVIEW_SAMPLES = 5
PREVIEW_SEQUENCES = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='stoch-future',
                                     description='Stochastic future prediction on synthetic worlds')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', default='Stoch-Future.ini', help='INI configuration file')
    parser.add_argument('--seed', type=int, help='Override [Run] seed')
    parser.add_argument('--out', help='Run directory (default: [Output] output_directory)')
    parser.add_argument('--data', help='Dataset directory (default: <out>/data)')
    parser.add_argument('--checkpoint', help='Checkpoint path (default: <out>/model.ckpt)')
    parser.add_argument('--n-samples', dest='n_samples', type=int,
                        help='Override [Evaluation] n_samples')
    parser.add_argument('--horizon', type=int, help='Override [Evaluation] eval_horizon')
    return parser


class StochFutureApp:
    """Main application controller"""

    def __init__(self, config_path: str = 'Stoch-Future.ini', overrides: Optional[dict] = None):
        """
        Initialize Stoch-Future application

        Args:
            config_path: Path to configuration file
            overrides: CLI overrides ('seed', 'n_samples', 'horizon')

        Raises:
            ConfigError: invalid configuration
        """
        self.manager = ConfigManager(config_path)
        self.manager.validate_config()
        self.config = RunConfig.from_manager(self.manager, overrides)
        tc.set_precision(self.config.precision)

        self.logger = create_logger(self.config.log_directory, self.config.log_filename_format,
                                    self.config.log_level)
        now = datetime.now()
        self.state = RunState(command='', start_time=now, end_time=now)

    # ------------------------------------------------------------------
    # Paths
    # ------------------------------------------------------------------

    def run_directory(self, out: Optional[str]) -> Path:
        path = Path(out or self.config.output_directory)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def load_data(self, data_dir: Path):
        manifest, sequences = load_dataset(str(data_dir), limit=self.config.n_sequences)
        if manifest.get('world_kind') != self.config.world_kind:
            raise ConfigError(f"Dataset {data_dir} holds the '{manifest.get('world_kind')}' world, "
                              f"configuration asks for '{self.config.world_kind}'")
        self.state.sequences_processed = len(sequences)
        return manifest, sequences

    def load_model(self, sequences, checkpoint: str):
        model = model_for_dataset(self.config, sequences)
        restore_into(model.params, load_checkpoint(checkpoint), model.kind)
        self.logger.log_operation("Checkpoint", "OK", f"Restored {model.kind} from {checkpoint}")
        return model

    # ------------------------------------------------------------------
    # Commands
    # ------------------------------------------------------------------

    def run(self, command: str, out: Optional[str] = None, data: Optional[str] = None,
            checkpoint: Optional[str] = None) -> int:
        """
        Run one CLI command

        Returns:
            Exit code: 0 success, 1 failure, 2 config/checkpoint mismatch,
            3 numerical abort, 130 interrupted
        """
        self.state.command = command
        self.state.start_time = datetime.now()
        try:
            self.display_welcome(command)
            run_dir = self.run_directory(out)
            data_dir = Path(data) if data else run_dir / 'data'
            checkpoint = checkpoint or str(run_dir / CHECKPOINT_NAME)
            handlers = {
                'gen-data': lambda: self.cmd_gen_data(data_dir),
                'train': lambda: self.cmd_train(run_dir, data_dir, checkpoint),
                'eval': lambda: self.cmd_eval(run_dir, data_dir, checkpoint),
                'sample': lambda: self.cmd_sample(run_dir, data_dir, checkpoint),
                'gradcheck': lambda: self.cmd_gradcheck(run_dir),
                'plot': lambda: self.cmd_plot(run_dir),
            }
            code = handlers[command]()
            self.state.end_time = datetime.now()
            self.display_summary()
            return code

        except KeyboardInterrupt as exc:
            self.logger.warning("Operation cancelled by user")
            print("\n\n[WARN] Operation cancelled by user")
            return exit_code_for(exc)
        except NumericalError as exc:
            self.state.errors.append(str(exc))
            self.logger.error(f"Numerical abort: {exc}")
            print(f"\n[ERROR] Numerical abort: {exc}")
            return exit_code_for(exc)
        except Exception as exc:
            self.state.errors.append(str(exc))
            self.logger.error(f"{type(exc).__name__}: {exc}")
            print(f"\n[ERROR] {exc}")
            return exit_code_for(exc)
        finally:
            self.logger.close()

    def cmd_gen_data(self, data_dir: Path) -> int:
        """Generate the configured synthetic dataset"""
        cfg = self.config
        print(f"[+] Generating {cfg.n_sequences} {cfg.world_kind} sequences...")
        manifest = write_dataset(str(data_dir), cfg.world_kind, cfg.world, cfg.n_sequences,
                                 cfg.seed, cfg.config_hash(), workers=cfg.workers,
                                 logger=self.logger)
        self.state.sequences_processed = cfg.n_sequences
        self.state.files_written.append(manifest)
        self.logger.log_operation("Dataset Generation", "OK", f"Manifest: {manifest}")
        print(f"[OK] Dataset written: {data_dir}")
        return 0

    def cmd_train(self, run_dir: Path, data_dir: Path, checkpoint: str) -> int:
        """Train the configured model and write the loss trace"""
        _, sequences = self.load_data(data_dir)
        model = model_for_dataset(self.config, sequences)
        print(f"[+] Training {model.kind} ({model.params.num_parameters()} parameters) "
              f"for {self.config.steps} steps...")
        trainer = Trainer(self.config, model, sequences, str(run_dir), logger=self.logger)
        result = trainer.train(checkpoint_path=checkpoint)
        self.state.steps_completed = result.steps_completed
        self.state.files_written.extend([result.trace_path, result.checkpoint_path]
                                        + result.periodic_checkpoints)
        print(f"[OK] Final loss: {result.final_total:.6g}")
        print(f"[OK] Checkpoint: {result.checkpoint_path}")
        return 0

    def cmd_eval(self, run_dir: Path, data_dir: Path, checkpoint: str) -> int:
        """Best-of-N evaluation with per-sequence and summary CSVs"""
        _, sequences = self.load_data(data_dir)
        model = self.load_model(sequences, checkpoint)
        print(f"[+] Evaluating {len(sequences)} sequences, {self.config.n_samples} samples each...")
        evaluator = Evaluator(self.config, model=model, logger=self.logger)
        result = evaluator.evaluate(sequences, model_sampler(model, self.config))

        exporter = ReportExporter(str(run_dir))
        written = [exporter.write_metric_csv(result.reports),
                   exporter.write_summary_csv(result.reports, result.extra)]
        if self.config.export_workbook:
            written.append(exporter.create_workbook(result.reports, result.extra))
        self.state.files_written.extend(written)
        for report in result.reports:
            summary = report.get_summary()
            print(f"  {summary['metric']:<22} {summary['region']:<11} "
                  f"{summary['mean']:.4f} +/- {summary['ci95']:.4f}")
        self.logger.log_operation("Evaluation", "OK", f"{len(result.reports)} reports")
        print(f"[OK] Metrics written to {run_dir}")
        return 0

    def cmd_sample(self, run_dir: Path, data_dir: Path, checkpoint: str) -> int:
        """
        Draw samples, measure run time and write previews

        Writes per sequence: a PGM grid (ground truth then samples), a PGM of
        the per-pixel standard deviation over samples, the raw predictions as
        an SDLIMG array and, for BEV models, instance maps of the first sample.
        """
        _, sequences = self.load_data(data_dir)
        model = self.load_model(sequences, checkpoint)
        cfg = self.config
        sampler = model_sampler(model, cfg)
        sample_dir = run_dir / 'samples'
        timings = []
        print(f"[+] Sampling {cfg.n_samples} futures for up to {PREVIEW_SEQUENCES} sequences...")
        for index, sequence in enumerate(sequences[:PREVIEW_SEQUENCES]):
            start = time.perf_counter()
            samples = sampler(sequence, index)
            timings.append((time.perf_counter() - start) / float(cfg.eval_horizon))

            predictions = np.stack([s.predictions for s in samples])
            gt = sequence.frames[cfg.k:cfg.k + cfg.eval_horizon]
            written = [write_array(str(sample_dir / f'samples_{index:03d}.sdl'), predictions)]
            if predictions.ndim == 5:
                rows = [list(gt)] + [list(p) for p in predictions[:PREVIEW_SAMPLES]]
                written.append(write_sequence_preview(str(sample_dir / f'preview_{index:03d}.pgm'),
                                                      rows))
                std = predictions.std(axis=0)
                written.append(write_pgm(str(sample_dir / f'std_{index:03d}.pgm'),
                                         tile_frames([frame_to_2d(f) for f in std])))
            if samples[0].labels is not None:
                ids = label_heads_to_instances(samples[0].labels, cfg)
                gray = tile_frames([instance_map_to_gray(m) for m in ids], fill=255)
                written.append(write_pgm(str(sample_dir / f'instances_{index:03d}.pgm'),
                                         gray, 0.0, 255.0))
            self.state.files_written.extend(written)

        extra = {'seconds_per_frame': float(np.mean(timings)) if timings else 0.0}
        self.logger.info(f"{model.kind}: {extra['seconds_per_frame']:.6f} s per predicted frame "
                         f"({cfg.n_samples} samples)")
        exporter = ReportExporter(str(run_dir))
        self.state.files_written.append(exporter.write_summary_csv([], extra, 'sample_summary.csv'))
        print(f"[OK] {extra['seconds_per_frame']:.6f} s per predicted frame")
        return 0

    def cmd_gradcheck(self, run_dir: Path) -> int:
        """Run every finite-difference check; nonzero exit on any failure"""
        print("[+] Running finite-difference gradient checks (64-bit)...")
        results = run_gradchecks(seed=self.config.seed, logger=self.logger)
        for result in results:
            status = '[OK]  ' if result.passed else '[FAIL]'
            print(f"  {status} {result.category:<10} {result.name:<26} "
                  f"{result.max_rel_error:.3e} {result.error}".rstrip())
        exporter = ReportExporter(str(run_dir))
        self.state.files_written.append(exporter.write_gradcheck_csv(results))
        failed = [r.name for r in results if not r.passed]
        if failed:
            self.state.errors.extend(failed)
            print(f"[FAIL] {len(failed)} of {len(results)} checks failed")
            return 1
        worst = max(r.max_rel_error for r in results)
        print(f"[OK] All {len(results)} checks passed, worst rel. err {worst:.3e}")
        return 0

    def cmd_plot(self, run_dir: Path) -> int:
        """Render loss curves, metric curves and sample grids as PNG"""
        from stoch_future import plotting

        written: List[str] = []
        trace = run_dir / TRACE_NAME
        if trace.exists():
            written.append(plotting.plot_loss_trace(str(trace), str(run_dir / 'loss_curve.png')))
        metrics = run_dir / 'metrics.csv'
        if metrics.exists():
            written.extend(plotting.plot_metric_curves(str(metrics), str(run_dir)))
        for path in sorted((run_dir / 'samples').glob('samples_*.sdl')):
            predictions = read_array(str(path))
            if predictions.ndim == 5:
                rows = [list(p) for p in predictions[:PREVIEW_SAMPLES]]
                labels = [f'sample {i}' for i in range(len(rows))]
                written.append(plotting.plot_sample_grid(rows, str(path.with_suffix('.png')),
                                                         labels))
        if not written:
            self.logger.warning(f"Nothing to plot in {run_dir}")
            print(f"[WARN] No loss trace, metrics or samples in {run_dir}")
            return 0
        self.state.files_written.extend(written)
        self.logger.log_operation("Plot", "OK", f"{len(written)} images")
        print(f"[OK] Wrote {len(written)} images")
        return 0

    # ------------------------------------------------------------------
    # Console output
    # ------------------------------------------------------------------

    def display_welcome(self, command: str):
        """Display welcome message"""
        print("=" * 60)
        print(f"  Stoch-Future v{__version__}")
        print(f"  Author: {__author__}")
        print(f"  Command: {command}  Model: {self.config.model_kind}  "
              f"World: {self.config.world_kind}")
        print("=" * 60)
        print()

        self.logger.info(f"Stoch-Future v{__version__} started: {command} "
                         f"(config hash {self.config.config_hash()[:12]})")

    def display_summary(self):
        """Display summary of the command"""
        summary = self.state.get_summary()
        print("\n" + "=" * 60)
        print("  Summary")
        print("=" * 60)
        print(f"  Command:          {summary['command']}")
        print(f"  Sequences:        {summary['sequences_processed']}")
        print(f"  Steps:            {summary['steps_completed']}")
        print(f"  Files Written:    {summary['files_written']}")
        print(f"  Errors:           {summary['error_count']}")
        print(f"  Duration:         {summary['duration_seconds']:.1f} s")
        print("=" * 60)
        print()

        self.logger.info(
            f"Summary: {summary['command']}, {summary['files_written']} files, "
            f"{summary['error_count']} errors, {summary['duration_seconds']:.1f} s"
        )


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1

    overrides = {'seed': args.seed, 'n_samples': args.n_samples, 'horizon': args.horizon}
    try:
        app = StochFutureApp(args.config, overrides)
    except Exception as exc:
        print(f"[ERROR] {exc}")
        return exit_code_for(exc)
    return app.run(args.command, out=args.out, data=args.data, checkpoint=args.checkpoint)


def main():
    """Main entry point"""
    sys.exit(run_cli())


if __name__ == '__main__':
    main()
