"""
连续高斯过程 - 命令行入口
continual-gp run <config.json> [--out DIR] [--replicas N] [--seed S]
continual-gp validate <config.json>
"""
import argparse
import logging
import sys

from config import EXIT_CODES, __version__
from errors import ConfigError, IngestionError
from harness import ExperimentConfig, load_config, run_experiment
from report_writer import format_step_table

logger = logging.getLogger(__name__)


def build_parser():
    parser = argparse.ArgumentParser(prog='continual-gp',
                                     description='连续稀疏变分高斯过程实验')
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('-v', '--verbose', action='store_true', help='输出调试日志')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='运行实验')
    run.add_argument('config', help='实验配置 (JSON)')
    run.add_argument('--out', help='输出目录')
    run.add_argument('--replicas', type=int, help='覆盖副本数')
    run.add_argument('--seed', type=int, help='覆盖随机种子')
    run.add_argument('--resume', action='store_true', help='从最新检查点继续')

    validate = sub.add_parser('validate', help='只校验配置')
    validate.add_argument('config', help='实验配置 (JSON)')
    return parser


def _override(cfg, args):
    raw = dict(cfg.raw)
    metrics = dict(raw.get('metrics', {}))
    if args.replicas is not None:
        metrics['replicas'] = args.replicas
    raw['metrics'] = metrics
    if args.seed is not None:
        raw['seed'] = args.seed
        schedule = dict(raw.get('schedule', {}))
        schedule.pop('seed', None)
        raw['schedule'] = schedule
    if args.out:
        raw['output_dir'] = args.out
    return ExperimentConfig.from_dict(raw)


def cmd_validate(args):
    cfg = load_config(args.config)
    print(f"✓ 配置有效: {cfg.name} ({cfg.model_type}, D={cfg.D}, Q={cfg.Q}, "
          f"{cfg.schedule.mode.value} T={cfg.schedule.T})")
    return EXIT_CODES['ok']


def cmd_run(args):
    cfg = _override(load_config(args.config), args)
    result = run_experiment(cfg, resume=args.resume)
    for d in range(cfg.D):
        print(format_step_table(result.report, channel=d))
    if result.alerts:
        print(f"⚠️ 漂移预警 {len(result.alerts)} 条, 详见 report.json")
    if result.all_aborted:
        print("✗ 所有副本均数值中止")
        return EXIT_CODES['numerical_abort']
    print(f"✓ 完成: {cfg.output_dir}")
    return EXIT_CODES['ok']


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(message)s')
    try:
        if args.command == 'validate':
            return cmd_validate(args)
        return cmd_run(args)
    except (ConfigError, IngestionError) as e:
        print(f"✗ 配置错误: {e}", file=sys.stderr)
        return EXIT_CODES['config_error']


if __name__ == '__main__':
    sys.exit(main())
