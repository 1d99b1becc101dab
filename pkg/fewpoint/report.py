# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Evaluation of completion networks and the metric reports built from it.

A report holds, per (variant, class, input size), the mean Chamfer distance and EMD over the test samples, the
reduction rates against a baseline variant and the sample count. Rows of class ``Average`` hold the unweighted mean
over classes, rates included.
"""

import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from fewpoint.dataset import subsample_seed
from fewpoint.errors import ContractError
from fewpoint.metrics import EXACT_EMD_LIMIT, chamfer, emd, reduction_rate
from fewpoint.network import CompletionNetwork
from fewpoint.pointcloud import SamplePair, random_subsample
from fewpoint.tool import create_parent

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['variant', 'class', 'input_size', 'cd_mean', 'emd_mean', 'cd_reduction', 'emd_reduction',
                  'n_samples']
AVERAGE = 'Average'
CD_LABEL = 'CD↓'
EMD_LABEL = 'EMD↓'
REDUCTION_TOLERANCE = 1e-12


def emd_note(epsilon: float = 0.01) -> str:
    return (f"emd: exact assignment up to {EXACT_EMD_LIMIT} points, auction (epsilon={epsilon}) above; "
            f"the larger cloud is first reduced by farthest point sampling")


@dataclass
class SampleScore:
    sample_id: str
    class_label: str
    input_size: int
    cd: float
    emd: float


def score_sample(network: CompletionNetwork, sample: SamplePair, input_size: int, seed: int,
                 through_generator: bool, epsilon: float = 0.01) -> SampleScore:
    """Complete a test partial subsampled to ``input_size`` points and compare the detail cloud to the truth."""
    partial = sample.partial
    if input_size > partial.count:
        raise ContractError(f"sample {sample.sample_id}: cannot take {input_size} points "
                            f"from a partial cloud of {partial.count}")
    if input_size < partial.count:
        partial = random_subsample(partial, input_size, subsample_seed(seed, sample.sample_id, input_size))
    _, detail = network.complete(partial, through_generator)
    return SampleScore(sample.sample_id, sample.class_label, input_size, chamfer(detail, sample.gt),
                       emd(detail, sample.gt, epsilon))


def evaluate(network: CompletionNetwork, samples: Sequence[SamplePair], input_sizes: Sequence[int], seed: int,
             through_generator: bool, threads: int = 1, epsilon: float = 0.01) -> list[SampleScore]:
    """
    Score every sample at every input size.

    Up to ``threads`` samples are completed concurrently; scores come back ordered by input size, then sample id.
    """
    if threads < 1:
        raise ContractError(f"threads must be >= 1, got {threads}")
    jobs = [(sample, size) for size in input_sizes for sample in sorted(samples, key=lambda s: s.sample_id)]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        scores = list(executor.map(lambda job: score_sample(network, job[0], job[1], seed, through_generator,
                                                            epsilon), jobs))
    logger.info(f"evaluation_done samples={len(samples)} input_sizes={list(input_sizes)} threads={threads}")
    return scores


def check_classes(expected: Sequence[str], present: Sequence[str], what: str) -> None:
    if missing := [c for c in expected if c not in set(present)]:
        raise ContractError(f"{what} has no sample of the classes {', '.join(missing)}")


class MetricsReport:
    """
    Metric table backed by a pandas DataFrame with the columns of :data:`REPORT_COLUMNS`.

    :param frame: The rows.
    :param baseline: Variant used as the reduction-rate denominator.
    :param note: Free text stored as a comment line before the CSV header.
    """

    def __init__(self, frame: pd.DataFrame, baseline: str, note: str = ''):
        self.frame = frame[REPORT_COLUMNS].reset_index(drop=True)
        self.baseline = baseline
        self.note = note

    @classmethod
    def from_scores(cls, scores: Mapping[str, Sequence[SampleScore]], baseline: str, note: str = '',
                    classes: Sequence[str] | None = None) -> 'MetricsReport':
        """
        Aggregate per-sample scores.

        :param scores: Scores by variant name; must include the baseline.
        :param baseline: Name of the baseline variant.
        :param classes: Expected classes, in column order. Defaults to the classes met in the baseline scores.
        """
        if baseline not in scores:
            raise ContractError(f"baseline variant {baseline!r} has no scores")
        if empty := [variant for variant, rows in scores.items() if not rows]:
            raise ContractError(f"variants without scores: {', '.join(empty)}")
        frames = {variant: pd.DataFrame([vars(s) for s in rows]) for variant, rows in scores.items()}
        if classes is None:
            classes = list(dict.fromkeys(frames[baseline]['class_label']))
        for variant, frame in frames.items():
            check_classes(classes, list(frame["class_label"]), f"variant {variant}")

        means = {variant: frame.groupby(['class_label', 'input_size'])
                 .agg(cd_mean=('cd', 'mean'), emd_mean=('emd', 'mean'), n_samples=('cd', 'size'))
                 for variant, frame in frames.items()}
        base = means[baseline]
        rows = []
        for variant, table in means.items():
            for input_size in sorted(table.index.get_level_values('input_size').unique()):
                class_rows = []
                for class_label in classes:
                    key = (class_label, input_size)
                    if key not in base.index:
                        raise ContractError(f"baseline {baseline!r} has no scores for class {class_label} "
                                            f"at input size {input_size}")
                    mine, theirs = table.loc[key], base.loc[key]
                    class_rows.append({'variant': variant, 'class': class_label, 'input_size': int(input_size),
                                       'cd_mean': float(mine.cd_mean), 'emd_mean': float(mine.emd_mean),
                                       'cd_reduction': reduction_rate(float(theirs.cd_mean), float(mine.cd_mean)),
                                       'emd_reduction': reduction_rate(float(theirs.emd_mean), float(mine.emd_mean)),
                                       'n_samples': int(mine.n_samples)})
                rows += class_rows
                rows.append(_average_row(variant, int(input_size), class_rows))
        return cls(pd.DataFrame(rows, columns=REPORT_COLUMNS), baseline, note)

    @property
    def classes(self) -> list[str]:
        return [c for c in dict.fromkeys(self.frame['class']) if c != AVERAGE]

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(self.frame['variant']))

    @property
    def input_sizes(self) -> list[int]:
        return sorted(int(s) for s in self.frame['input_size'].unique())

    def cross_check(self) -> None:
        """
        Recompute every reduction rate from the stored means.

        :raise ContractError: When a stored rate differs by more than 1e-12.
        """
        frame = self.frame
        per_class = frame[frame['class'] != AVERAGE]
        base = per_class[per_class['variant'] == self.baseline].set_index(['class', 'input_size'])
        if base.empty:
            raise ContractError(f"report has no rows for its baseline {self.baseline!r}")
        for _, row in per_class.iterrows():
            reference = base.loc[(row["class"], row["input_size"])]
            for metric in ("cd", "emd"):
                expected = reduction_rate(float(reference[f"{metric}_mean"]), float(row[f"{metric}_mean"]))
                stored = float(row[f"{metric}_reduction"])
                if abs(stored - expected) > REDUCTION_TOLERANCE:
                    raise ContractError(f"{metric} reduction of {row['variant']}/{row['class']}/{row['input_size']} "
                                        f"is {stored}, recomputed {expected}")
        averages = frame[frame['class'] == AVERAGE]
        for row in averages.itertuples(index=False):
            members = per_class[(per_class['variant'] == row.variant) & (per_class['input_size'] == row.input_size)]
            for column in ('cd_reduction', 'emd_reduction'):
                expected = float(members[column].mean())
                if abs(getattr(row, column) - expected) > REDUCTION_TOLERANCE:
                    raise ContractError(f"average {column} of {row.variant}/{row.input_size} is "
                                        f"{getattr(row, column)}, recomputed {expected}")

    def reduction_table(self, variant: str, input_size: int) -> pd.DataFrame:
        """Rows CD↓ and EMD↓, one column per class and Average last."""
        rows = self._rows(variant, input_size)
        return pd.DataFrame([rows['cd_reduction'].to_numpy(), rows['emd_reduction'].to_numpy()],
                            index=[CD_LABEL, EMD_LABEL], columns=list(rows['class']))

    def mean_table(self, input_size: int) -> pd.DataFrame:
        """Raw means: rows (variant, CD|EMD), one column per class and Average last."""
        blocks = {}
        for variant in self.variants:
            rows = self._rows(variant, input_size)
            blocks[(variant, 'CD')] = rows['cd_mean'].to_numpy()
            blocks[(variant, 'EMD')] = rows['emd_mean'].to_numpy()
        return pd.DataFrame.from_dict(blocks, orient='index', columns=self.classes + [AVERAGE])

    def ablation_table(self, input_size: int) -> pd.DataFrame:
        """Reduction rates of every variant: rows (variant, CD↓|EMD↓), one column per class and Average last."""
        blocks = {}
        for variant in self.variants:
            rows = self._rows(variant, input_size)
            blocks[(variant, CD_LABEL)] = rows['cd_reduction'].to_numpy()
            blocks[(variant, EMD_LABEL)] = rows['emd_reduction'].to_numpy()
        table = pd.DataFrame.from_dict(blocks, orient='index', columns=self.classes + [AVERAGE])
        table.index = pd.MultiIndex.from_tuples(table.index, names=['variant', 'metric'])
        return table

    def _rows(self, variant: str, input_size: int) -> pd.DataFrame:
        frame = self.frame
        rows = frame[(frame['variant'] == variant) & (frame['input_size'] == input_size)]
        if rows.empty:
            raise ContractError(f"report has no rows for variant {variant!r} at input size {input_size}")
        order = {c: i for i, c in enumerate(self.classes + [AVERAGE])}
        return rows.sort_values('class', key=lambda s: s.map(order))

    def to_csv(self, path: str) -> None:
        create_parent(path)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(f"# baseline={self.baseline}\n")
            if self.note:
                f.write(f"# {self.note}\n")
            self.frame.to_csv(f, index=False, lineterminator='\n', float_format='%.17g')

    @classmethod
    def read_csv(cls, path: str) -> 'MetricsReport':
        """Load a report written by :meth:`to_csv` and cross-check its reduction rates."""
        baseline, note = None, ''
        with open(path, encoding='utf-8') as f:
            for line in f:
                if not line.startswith('#'):
                    break
                text = line[1:].strip()
                if text.startswith('baseline='):
                    baseline = text.removeprefix('baseline=')
                else:
                    note = text
        frame = pd.read_csv(path, comment='#', dtype={'variant': str, 'class': str})
        if list(frame.columns) != REPORT_COLUMNS:
            raise ContractError(f"{path}: expected columns {REPORT_COLUMNS}, got {list(frame.columns)}")
        if baseline is None:
            raise ContractError(f"{path}: no baseline line")
        report = cls(frame, baseline, note)
        report.cross_check()
        return report


def _average_row(variant: str, input_size: int, class_rows: list[dict]) -> dict:
    def mean(column):
        return float(np.mean([r[column] for r in class_rows]))

    return {'variant': variant, 'class': AVERAGE, 'input_size': input_size,
            'cd_mean': mean('cd_mean'), 'emd_mean': mean('emd_mean'),
            'cd_reduction': mean('cd_reduction'), 'emd_reduction': mean('emd_reduction'),
            'n_samples': int(sum(r['n_samples'] for r in class_rows))}


def format_rates(table: pd.DataFrame) -> str:
    """Rates as percentages with two decimals, for the terminal."""
    return table.map(lambda v: f"{100.0 * v:.2f}%").to_string()


def write_table(table: pd.DataFrame, path: str) -> None:
    create_parent(path)
    table.to_csv(path, float_format='%.17g', lineterminator='\n')


def write_ablation_excel(tables: Mapping[int, pd.DataFrame], path: str) -> None:
    """One sheet per input size."""
    create_parent(path)
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        for input_size, table in tables.items():
            table.to_excel(writer, sheet_name=f"input_{input_size}")
