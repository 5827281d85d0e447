import argparse
import dataclasses
import logging
import os
import sys

from . import datagen, harness, toyproblems
from .config import (
    ConfigurationError,
    ExperimentConfig,
    SweepAxis,
    load_config_file,
    parse_int_tuple,
)
from .tensor import TrainingAborted

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

# handled by dedicated flags below
_SPECIAL_FIELDS = ("debug",)


def main():
    cli = OffsetFedCli(sys.argv[1:])
    sys.exit(cli.exit_code)


class OffsetFedCli:
    def __init__(self, args):
        parser = argparse.ArgumentParser(
            prog="offsetfed",
            description="Federated learning simulator with learned input offsets",
        )
        parser.add_argument(
            "action",
            choices=["partition", "train", "sweep", "motivate", "overhead"],
        )
        parser.add_argument(
            "-c", "--config", help="Configuration file with 'key = value' lines"
        )
        parser.add_argument(
            "-d", "--debug", help="Enable debug mode", action="store_true"
        )
        parser.add_argument(
            "--axis",
            choices=[axis.value for axis in SweepAxis],
            help="Configuration field to sweep (sweep only)",
        )
        parser.add_argument(
            "--values", help="Comma-separated values to sweep over (sweep only)"
        )
        parser.add_argument(
            "--shape",
            default="64,64,3",
            help="Sample shape for the overhead report (overhead only)",
        )
        parser.add_argument(
            "--form",
            choices=[form.value for form in toyproblems.OffsetForm],
            default=toyproblems.OffsetForm.GAIN.value,
            help="How the toy offsets transform inputs (motivate only)",
        )
        config_flags = parser.add_argument_group(
            "experiment", "Override configuration keys (flags win over --config)"
        )
        for f in dataclasses.fields(ExperimentConfig):
            if f.name in _SPECIAL_FIELDS:
                continue
            config_flags.add_argument(
                f"--{f.name.replace('_', '-')}",
                dest=f.name,
                metavar="VALUE",
                help=f"default: {_describe_default(f.default)}",
            )
        args = parser.parse_args(args)

        if args.debug:
            logging.basicConfig(
                level=logging.DEBUG,
                format="%(asctime)s %(levelname)-8s %(name)s: %(message)s",
            )
        else:
            logging.basicConfig(level=logging.INFO, format="%(message)s")

        self.exit_code = EXIT_OK
        self.config = None
        try:
            self.config = self._load_config(args)
            if args.action == "partition":
                self.partition()
            elif args.action == "train":
                self.train()
            elif args.action == "sweep":
                if args.axis is None or not args.values:
                    parser.error("Need --axis and --values when using sweep")
                self.sweep(args.axis, [v.strip() for v in args.values.split(",")])
            elif args.action == "motivate":
                self.motivate(args.form)
            elif args.action == "overhead":
                self.overhead(args.shape, args.num_classes is not None)
            else:
                parser.error(f"unsupported action {args.action}")
        except ConfigurationError as ex:
            logger.error(f"Configuration error: {ex}")
            self.exit_code = EXIT_CONFIG
        except TrainingAborted as ex:
            logger.error(f"Training aborted: {ex}")
            self.exit_code = EXIT_RUNTIME
        except KeyboardInterrupt:
            logger.warning("Interrupted")
            self.exit_code = EXIT_RUNTIME
        except Exception as ex:  # pylint: disable=broad-except
            logger.error(f"{type(ex).__name__}: {ex}")
            logger.debug("Traceback", exc_info=True)
            self.exit_code = EXIT_RUNTIME

    @staticmethod
    def _load_config(args) -> ExperimentConfig:
        values = {}
        if args.config is not None:
            values.update(load_config_file(args.config))
        for f in dataclasses.fields(ExperimentConfig):
            if f.name in _SPECIAL_FIELDS:
                continue
            value = getattr(args, f.name)
            if value is not None:
                values[f.name] = value
        if args.debug:
            values["debug"] = True
        return ExperimentConfig.from_mapping(values)

    def partition(self):
        cfg = self.config
        _, _, p = harness.build_partition(cfg)
        dh = datagen.distributional_heterogeneity(p)
        path = cfg.partition_export_path or "partition.json"
        if os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)
        datagen.save_partition(path, p)
        for client in range(p.num_clients):
            logger.info(
                f"Client {client}: {len(p.assignments[client])} samples, "
                f"classes {p.client_classes(client).tolist()}"
            )
        logger.info(f"DH {dh:.4f}, partition written to {path}")

    def train(self):
        result = harness.run_experiment(self.config)
        logger.info(
            f"Final test accuracy {result.final_accuracy:.4f} "
            f"(DH {result.dh:.3f}, strategy {result.records[-1].strategy.value})"
        )

    def sweep(self, axis, values):
        rows = harness.ablation_sweep(self.config, axis, values)
        for row in rows:
            logger.info(
                f"{axis} = {row.value}: final accuracy {row.final_accuracy:.4f}"
            )

    def motivate(self, form):
        output_dir = self.config.output_dir or "motivate"
        toyproblems.motivate(
            os.path.expanduser(output_dir),
            seed=self.config.seed,
            form=toyproblems.OffsetForm(form),
        )

    def overhead(self, shape, classes_given):
        cfg = self.config
        try:
            shape = parse_int_tuple(shape)
        except ValueError:
            raise ConfigurationError(f"bad --shape {shape!r}") from None
        if not shape or any(d < 1 for d in shape):
            raise ConfigurationError(f"bad --shape {shape!r}")
        classes = cfg.num_classes if classes_given else harness.DEFAULT_OVERHEAD_CLASSES
        report = harness.overhead_for_shape(shape, classes, cfg.hidden, cfg.dense_width)
        logger.info(f"Single-channel weights: {report.single_channel_bytes} bytes")
        logger.info(f"Double-channel weights: {report.weight_bytes} bytes")
        logger.info(f"Offset: {report.offset_bytes} bytes")
        logger.info(f"Overhead: {report.delta_percent:.3f}%")
        if cfg.output_dir is not None:
            out = os.path.expanduser(cfg.output_dir)
            os.makedirs(out, exist_ok=True)
            harness.write_overhead_csv(os.path.join(out, "overhead.csv"), report)


def _describe_default(value) -> str:
    if value is None:
        return "unset"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(getattr(value, "value", value))
