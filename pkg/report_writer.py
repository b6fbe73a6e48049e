"""
连续高斯过程 - 报告输出模块
report.csv / report.json / timing.json / curves_t<k>.csv 与控制台表格
"""
import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd

from config import REPORT_COLUMNS, __version__

logger = logging.getLogger(__name__)

KIND_ORDER = {'new': 0, 'old': 1, 'global': 2, 'global_mean': 3}


def version_stamp(config_dict):
    """版本号 + 配置哈希"""
    digest = hashlib.sha1(json.dumps(config_dict, sort_keys=True).encode('utf-8')).hexdigest()
    return f"{__version__}+{digest[:10]}"


def aggregate_reports(replica_reports):
    """
    把各副本的 StepReport 汇总为报告表, 每行 = 步 × 区域 × 通道 × 类型
    replica_reports: 每个副本一个 StepReport 列表
    """
    records = []
    for replica, reports in enumerate(replica_reports):
        for rep in reports:
            for row in rep.rows:
                records.append(dict(row, replica=replica, n_inducing=rep.n_inducing,
                                    elbo=rep.elbo))
    if not records:
        return pd.DataFrame(columns=REPORT_COLUMNS)

    df = pd.DataFrame.from_records(records)
    keys = ['step', 'region', 'channel', 'kind']
    grouped = df.groupby(keys, sort=False)
    out = grouped.agg(
        n_test=('n_test', 'max'),
        nlpd_mean=('nlpd', 'mean'),
        nlpd_std=('nlpd', lambda s: float(np.std(s.to_numpy()))),
        error_rate_mean=('error_rate', 'mean'),
        error_rate_std=('error_rate', lambda s: float(np.std(s.to_numpy()))),
        n_inducing=('n_inducing', 'mean'),
        elbo_mean=('elbo', 'mean'),
        replicas_ok=('replica', 'nunique'),
    ).reset_index()
    out['_kind'] = out['kind'].map(KIND_ORDER)
    out = out.sort_values(['step', 'channel', '_kind', 'region'], kind='mergesort')
    return out[REPORT_COLUMNS].reset_index(drop=True)


# ==================== 文件输出 ====================

def _write(path, writer):
    try:
        writer(path)
    except OSError as e:
        raise OSError(f"写入失败 {path}: {e}") from e
    return path


def write_curves(out_dir, step, grid, curves):
    """
    curves_t<step+1>.csv: x, 每个通道 mean/lower/upper (隐函数 ±2σ)
    curves: {channel: (mean, var)}
    """
    data = {'x': np.asarray(grid, dtype=float).ravel()}
    for d in sorted(curves):
        mean, var = curves[d]
        sd = np.sqrt(np.maximum(var, 0.0))
        data[f'mean_{d}'] = mean
        data[f'lower_{d}'] = mean - 2.0 * sd
        data[f'upper_{d}'] = mean + 2.0 * sd
    path = os.path.join(out_dir, f"curves_t{step + 1}.csv")
    return _write(path, lambda p: pd.DataFrame(data).to_csv(p, index=False))


def emit_reports(report_df, payload, timing, curves, out_dir):
    """
    写出全部报告文件, 返回路径列表
    curves: [(step, grid, {channel: (mean, var)}), ...]
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        _write(os.path.join(out_dir, 'report.csv'),
               lambda p: report_df.to_csv(p, index=False)),
        _write(os.path.join(out_dir, 'report.json'),
               lambda p: _dump_json(p, dict(payload, summary=_records(report_df)))),
        _write(os.path.join(out_dir, 'timing.json'), lambda p: _dump_json(p, timing)),
    ]
    for step, grid, channel_curves in curves:
        paths.append(write_curves(out_dir, step, grid, channel_curves))
    logger.info(f"✓ 报告已写入 {out_dir} ({len(paths)} 个文件)")
    return paths


def load_report(path):
    return pd.read_csv(path, float_precision='round_trip')


def _records(df):
    return json.loads(df.to_json(orient='records', double_precision=15))


def _dump_json(path, obj):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, ensure_ascii=False, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"无法序列化: {type(o)}")


# ==================== 控制台表格 ====================

def format_step_table(report_df, channel=0, scale=1.0):
    """NLPD 表: 行 = 步, 列 = new / 各旧区域 / global"""
    df = report_df[report_df['channel'] == channel]
    if df.empty:
        return f"(通道{channel}无数据)"
    steps = sorted(df['step'].unique())
    regions = sorted(r for r in df['region'].unique() if r >= 0)

    header = f"{'step':>5} | " + ' '.join(f"{'R' + str(r + 1):>10}" for r in regions) \
        + f" | {'global':>10}"
    lines = [
        "=" * len(header),
        f"通道{channel} NLPD" + (f" (×{scale:g})" if scale != 1.0 else ''),
        "=" * len(header),
        header,
        "-" * len(header),
    ]
    for step in steps:
        rows = df[df['step'] == step]
        cells = []
        for r in regions:
            hit = rows[rows['region'] == r]
            if hit.empty:
                cells.append(f"{'':>10}")
            else:
                value = hit['nlpd_mean'].iloc[0] * scale
                mark = '*' if hit['kind'].iloc[0] == 'new' else ' '
                cells.append(f"{value:>9.4f}{mark}")
        glob_row = rows[rows['kind'] == 'global']
        glob = f"{glob_row['nlpd_mean'].iloc[0] * scale:>10.4f}" if not glob_row.empty else f"{'':>10}"
        lines.append(f"{step + 1:>5} | " + ' '.join(cells) + f" | {glob}")
    lines.append("(* = 本步新区域)")
    return "\n".join(lines)
