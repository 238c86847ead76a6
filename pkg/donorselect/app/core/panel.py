import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from donorselect.app.core.errors import IngestionError, PanelError
from donorselect.app.core.models import NormalizationParams, Panel

logger = logging.getLogger(__name__)

TIME_COLUMN = "time"
FLOAT_FORMAT = "%.17g"


class PanelParser:
    """CSV panel reader: header row, integer `time` column, numeric target and donor columns"""

    def __init__(self, target_column: str, time_column: str = TIME_COLUMN):
        self.target_column = target_column
        self.time_column = time_column

    def parse(self, path: Union[str, Path], intervention_time: int) -> Panel:
        frame = self._read_frame(path)
        self._validate_columns(frame)

        times = self._parse_times(frame[self.time_column])
        values = {
            column: self._parse_numeric(frame[column], column)
            for column in frame.columns if column != self.time_column
        }

        order = np.argsort(times, kind="stable")
        times = times[order]
        self._validate_times(times)

        t_star = self._locate_intervention(times, intervention_time)
        donor_ids = [c for c in frame.columns if c not in (self.time_column, self.target_column)]
        panel = Panel(
            times=times,
            target=values[self.target_column][order],
            donors=np.vstack([values[d][order] for d in donor_ids]),
            donor_ids=tuple(donor_ids),
            intervention_time=t_star,
            target_id=self.target_column,
        )
        logger.info(
            f"Ingested {path}: T={panel.n_times}, N={panel.n_donors}, "
            f"pre={panel.n_pre}, post={panel.n_post}"
        )
        return panel

    def _read_frame(self, path: Union[str, Path]) -> pd.DataFrame:
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"file not found: {path}")
        try:
            return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise IngestionError(f"unreadable CSV {path}: {e}") from None

    def _validate_columns(self, frame: pd.DataFrame):
        columns = [str(c).strip() for c in frame.columns]
        frame.columns = columns
        if len(set(columns)) != len(columns):
            raise IngestionError("duplicate column names in header")
        for required in (self.time_column, self.target_column):
            if required not in columns:
                raise IngestionError("missing required column", column=required)
        if len(columns) < 3:
            raise IngestionError("no donor columns besides time and target")
        if frame.empty:
            raise IngestionError("no data rows")

    def _parse_times(self, column: pd.Series) -> np.ndarray:
        times = np.empty(len(column), dtype=np.int64)
        for row, raw in enumerate(column):
            try:
                times[row] = int(raw.strip())
            except ValueError:
                raise IngestionError(f"non-integer time value '{raw}'", row=row + 1, column=self.time_column) from None
        return times

    def _parse_numeric(self, column: pd.Series, name: str) -> np.ndarray:
        try:
            values = column.str.strip().astype(float).to_numpy()
        except ValueError:
            values = None
        if values is not None and np.all(np.isfinite(values)) and not (column.str.strip() == "").any():
            return values
        # Slow path to name the offending cell
        for row, raw in enumerate(column):
            token = raw.strip()
            if token == "":
                raise IngestionError("blank cell", row=row + 1, column=name)
            try:
                value = float(token)
            except ValueError:
                raise IngestionError(f"non-numeric cell '{raw}'", row=row + 1, column=name) from None
            if not np.isfinite(value):
                raise IngestionError(f"non-finite cell '{raw}'", row=row + 1, column=name)
        raise IngestionError("unparseable column", column=name)

    def _validate_times(self, times: np.ndarray):
        steps = np.diff(times)
        if np.any(steps == 0):
            dup = int(times[1:][steps == 0][0])
            raise IngestionError(f"duplicate time index {dup}", column=self.time_column)
        if np.any(steps != 1):
            gap = int(times[1:][steps != 1][0])
            raise IngestionError(f"gap in time grid before {gap}", column=self.time_column)

    def _locate_intervention(self, times: np.ndarray, intervention_time: int) -> int:
        position = int(intervention_time) - int(times[0])
        if not 1 <= position <= len(times) - 1:
            raise IngestionError(
                f"intervention_time {intervention_time} outside observed range "
                f"({times[0]}..{times[-1]}) or leaves no pre-intervention data",
                column=self.time_column,
            )
        return position


def ingest_csv(path: Union[str, Path], target_column: str, intervention_time: int) -> Panel:
    return PanelParser(target_column).parse(path, intervention_time)


def panel_frame(panel: Panel) -> pd.DataFrame:
    frame = pd.DataFrame({TIME_COLUMN: panel.times, panel.target_id: panel.target})
    donors = pd.DataFrame(panel.donors.T, columns=list(panel.donor_ids))
    return pd.concat([frame, donors], axis=1)


def emit_csv(panel: Panel, path: Union[str, Path]) -> Path:
    """Write the panel in the ingestion format; doubles keep 17 significant digits"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panel_frame(panel).to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    return path


def normalize(panel: Panel) -> Tuple[Panel, NormalizationParams]:
    """z-score every donor with its pre-intervention mean and sample std"""
    if panel.n_pre < 2:
        raise PanelError("normalization needs at least two pre-intervention points")
    pre = panel.pre_donors
    means = pre.mean(axis=1)
    stds = pre.std(axis=1, ddof=1)
    degenerate = stds <= 1e-12 * np.maximum(np.abs(means), 1.0)
    if np.any(degenerate):
        bad = [d for d, flag in zip(panel.donor_ids, degenerate) if flag]
        raise PanelError(f"zero pre-intervention variance for donor(s): {bad[:5]}")
    scaled = (panel.donors - means[:, None]) / stds[:, None]
    params = NormalizationParams(donor_ids=panel.donor_ids, means=means, stds=stds)
    return panel.with_donors(scaled, panel.donor_ids), params


def denormalize(panel: Panel, params: NormalizationParams) -> Panel:
    if tuple(params.donor_ids) != panel.donor_ids:
        raise PanelError("normalization parameters belong to a different donor set")
    raw = panel.donors * params.stds[:, None] + params.means[:, None]
    return panel.with_donors(raw, panel.donor_ids)


def bucket_bounds(n_pre: int, n_post: int, bucket: int) -> List[Tuple[int, int]]:
    """[start, stop) positions of full buckets anchored at the intervention"""
    n_pre_buckets = n_pre // bucket
    n_post_buckets = n_post // bucket
    pre = [(n_pre - (k + 1) * bucket, n_pre - k * bucket) for k in reversed(range(n_pre_buckets))]
    post = [(n_pre + k * bucket, n_pre + (k + 1) * bucket) for k in range(n_post_buckets)]
    return pre + post


def time_average(panel: Panel, bucket: int) -> Panel:
    """
    Replace target and donors by bucket means.

    Buckets run backwards from the last pre-intervention point and forwards from
    the intervention, so none mixes pre and post data. The leading partial pre
    bucket and the trailing partial post bucket are dropped.
    """
    if bucket < 1:
        raise PanelError("bucket must be at least 1")
    if bucket > panel.n_pre or bucket > panel.n_post:
        raise PanelError(
            f"bucket={bucket} exceeds the pre ({panel.n_pre}) or post ({panel.n_post}) span"
        )
    if bucket == 1:
        return panel

    bounds = bucket_bounds(panel.n_pre, panel.n_post, bucket)
    n_pre_buckets = panel.n_pre // bucket
    target = np.array([panel.target[a:b].mean() for a, b in bounds])
    donors = np.column_stack([panel.donors[:, a:b].mean(axis=1) for a, b in bounds])
    times = np.array([panel.times[a] for a, _ in bounds])

    dropped = (panel.n_pre % bucket, panel.n_post % bucket)
    if any(dropped):
        logger.info(f"time_average(bucket={bucket}) dropped {dropped[0]} leading pre and {dropped[1]} trailing post points")
    return Panel(
        times=times,
        target=target,
        donors=donors,
        donor_ids=panel.donor_ids,
        intervention_time=n_pre_buckets,
        target_id=panel.target_id,
    )
