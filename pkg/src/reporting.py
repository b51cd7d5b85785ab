"""
Cluster characteristics, purity statistics and plot-ready exports.

A cluster summary follows the usual cluster characteristics
table: size, race counts [Asian, Black, Caucasian, Hispanic, Other], age
[min, median, max], [with, without] counts for polyps, drusen and SRH,
[male, female], plus the disease composition [ARMD, CSCR, PCV].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from .clustering import LatentPoint, latents_to_frame
from .datagen import DISEASES, Cohort, Disease, DiseaseModel, Race
from .exceptions import JoinError, ValidationError
from .logger import get_logger, log_struct

SUMMARY_COLUMNS = [
    "cluster", "size",
    "asian", "black", "caucasian", "hispanic", "other",
    "age_min", "age_median", "age_max",
    "polyps_with", "polyps_without",
    "drusen_with", "drusen_without",
    "srh_with", "srh_without",
    "male", "female",
    "armd", "cscr", "pcv",
]
TABLE_COLUMNS = ["ID", "Size", "Race", "Age", "Polyps", "Drusen", "SRH", "Sex"]
PURITY_ATTRIBUTES = ("polyps", "sex", "drusen", "srh")

AGE_GRID = np.arange(0.0, 111.0, 1.0)


@dataclass(frozen=True)
class ClusterSummary:
    """Characteristics of one cluster. ``cluster`` is 0-based; reports print cluster + 1."""

    cluster: int
    size: int
    race_dist: Tuple[int, int, int, int, int]
    age_min: float
    age_median: float
    age_max: float
    polyps_with: int
    polyps_without: int
    drusen_with: int
    drusen_without: int
    srh_with: int
    srh_without: int
    male: int
    female: int
    disease_dist: Tuple[int, int, int] = (0, 0, 0)

    @property
    def report_id(self) -> int:
        return self.cluster + 1

    def split(self, attribute: str) -> Tuple[int, int]:
        """(with, without) for a finding, (male, female) for sex."""
        if attribute == "sex":
            return self.male, self.female
        return getattr(self, f"{attribute}_with"), getattr(self, f"{attribute}_without")


@dataclass
class PurityReport:
    """Share of clusters in which one side of an attribute holds every member."""

    attribute_purity: Dict[str, float]
    pure_clusters: Dict[str, List[int]]
    disease_composition: List[Tuple[int, int]]  # (report id, number of diseases present)
    all_three: List[int] = field(default_factory=list)
    two_disease: List[int] = field(default_factory=list)
    single_disease: List[int] = field(default_factory=list)


def summarize_clusters(
    cohort: Cohort,
    latents: Sequence[LatentPoint],
    k: Optional[int] = None,
    logger: Optional[logging.Logger] = None,
) -> List[ClusterSummary]:
    """One summary per non-empty cluster, sorted by cluster index.

    Args:
        cohort: Records the latents were inferred from
        latents: Points with cluster assignments
        k: Cluster count, used only to warn about empty clusters

    Raises:
        JoinError: If a latent id is missing from the cohort, appears twice,
            or the latents do not cover every cohort record
        ValidationError: If a point is unassigned
    """
    logger = logger or get_logger()
    records = cohort.by_id()
    members: Dict[int, list] = {}
    seen: set = set()
    for point in latents:
        if point.cluster is None:
            raise ValidationError(
                f"Latent point {point.id} has no cluster assignment",
                context={"id": point.id},
            )
        if point.id not in records:
            raise JoinError(
                f"Latent point {point.id} has no matching cohort record",
                context={"id": point.id},
            )
        if point.id in seen:
            raise JoinError(
                f"Latent point {point.id} appears more than once",
                context={"id": point.id},
            )
        seen.add(point.id)
        members.setdefault(point.cluster, []).append(records[point.id])

    missing = sorted(set(records) - seen)
    if latents and missing:
        raise JoinError(
            f"Latents cover {len(seen)} of {len(records)} cohort records; missing ids {missing[:10]}",
            context={"missing": missing[:10], "missing_count": len(missing)},
        )

    if k is not None:
        empty = [c + 1 for c in range(k) if c not in members]
        if empty:
            log_struct(
                logger,
                "WARNING",
                f"Empty clusters omitted from report: {empty}",
                labels={"stage": "report"},
                fields={"empty_clusters": empty},
            )

    summaries = []
    for cluster in sorted(members):
        group = members[cluster]
        ages = np.array([p.age for p in group])
        size = len(group)
        polyps = sum(p.polyps for p in group)
        drusen = sum(p.drusen for p in group)
        srh = sum(p.srh for p in group)
        male = sum(p.sex for p in group)
        summaries.append(
            ClusterSummary(
                cluster=cluster,
                size=size,
                race_dist=tuple(sum(p.race == race for p in group) for race in Race),
                age_min=float(ages.min()),
                age_median=float(np.median(ages)),
                age_max=float(ages.max()),
                polyps_with=polyps,
                polyps_without=size - polyps,
                drusen_with=drusen,
                drusen_without=size - drusen,
                srh_with=srh,
                srh_without=size - srh,
                male=male,
                female=size - male,
                disease_dist=tuple(sum(p.disease == d for p in group) for d in DISEASES),
            )
        )
    return summaries


def audit_summary(summary: ClusterSummary) -> List[str]:
    """Violated invariants of one summary (empty when consistent)."""
    problems = []
    if sum(summary.race_dist) != summary.size:
        problems.append(f"race counts sum to {sum(summary.race_dist)}, size is {summary.size}")
    for attribute in PURITY_ATTRIBUTES:
        first, second = summary.split(attribute)
        if first + second != summary.size:
            problems.append(f"{attribute} counts sum to {first + second}, size is {summary.size}")
    if sum(summary.disease_dist) != summary.size:
        problems.append(
            f"disease counts sum to {sum(summary.disease_dist)}, size is {summary.size}"
        )
    if not summary.age_min <= summary.age_median <= summary.age_max:
        problems.append("ages are not ordered min <= median <= max")
    return problems


def purity_stats(summaries: Sequence[ClusterSummary]) -> PurityReport:
    """Attribute purity over clusters and per-cluster disease composition.

    Raises:
        ValidationError: If there are no summaries
    """
    if not summaries:
        raise ValidationError("Purity needs at least one cluster summary")

    pure_clusters = {}
    for attribute in PURITY_ATTRIBUTES:
        pure_clusters[attribute] = [
            s.report_id for s in summaries if 0 in s.split(attribute)
        ]
    attribute_purity = {
        attribute: len(ids) / len(summaries) for attribute, ids in pure_clusters.items()
    }

    composition = [
        (s.report_id, sum(1 for count in s.disease_dist if count > 0)) for s in summaries
    ]
    return PurityReport(
        attribute_purity=attribute_purity,
        pure_clusters=pure_clusters,
        disease_composition=composition,
        all_three=[cid for cid, n in composition if n == 3],
        two_disease=[cid for cid, n in composition if n == 2],
        single_disease=[cid for cid, n in composition if n == 1],
    )


def cluster_observations(summaries: Sequence[ClusterSummary]) -> List[str]:
    """Plain-language findings: one-sided attributes, single-race clusters, age extremes, disease mix."""
    if not summaries:
        return []
    purity = purity_stats(summaries)
    notes = []

    for attribute in PURITY_ATTRIBUTES:
        share = purity.attribute_purity[attribute]
        if share == 1.0:
            notes.append(f"{attribute} is not mixed: every cluster is one-sided")
        elif share == 0.0:
            notes.append(f"{attribute} is mixed in every cluster")

    for race in Race:
        sole = [s.report_id for s in summaries if s.race_dist[race] == s.size]
        if sole:
            notes.append(f"clusters with only {race.name.lower()} members: {sole}")

    medians = {s.report_id: s.age_median for s in summaries}
    youngest = min(medians.values())
    oldest = max(medians.values())
    notes.append(
        f"youngest median age {youngest:.0f}: clusters "
        f"{[cid for cid, m in medians.items() if m == youngest]}"
    )
    notes.append(
        f"oldest median age {oldest:.0f}: clusters "
        f"{[cid for cid, m in medians.items() if m == oldest]}"
    )

    notes.append(
        f"{len(purity.all_three)} of {len(summaries)} clusters contain all three diseases: "
        f"{purity.all_three}"
    )
    if purity.two_disease:
        notes.append(
            f"{len(purity.two_disease)} clusters contain exactly two diseases: "
            f"{purity.two_disease}"
        )
    return notes


def summaries_frame(summaries: Sequence[ClusterSummary]) -> pd.DataFrame:
    """Machine-readable report, one row per cluster, ages at full precision."""
    rows = [
        [
            s.report_id, s.size, *s.race_dist,
            s.age_min, s.age_median, s.age_max,
            s.polyps_with, s.polyps_without,
            s.drusen_with, s.drusen_without,
            s.srh_with, s.srh_without,
            s.male, s.female,
            *s.disease_dist,
        ]
        for s in summaries
    ]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def _brackets(values: Sequence) -> str:
    return "[" + ",".join(str(v) for v in values) + "]"


def render_table(summaries: Sequence[ClusterSummary]) -> str:
    """Human-readable table in bracket notation; ages rounded to whole years."""
    rows = [
        [
            s.report_id,
            s.size,
            _brackets(s.race_dist),
            _brackets(f"{age:.0f}" for age in (s.age_min, s.age_median, s.age_max)),
            _brackets(s.split("polyps")),
            _brackets(s.split("drusen")),
            _brackets(s.split("srh")),
            _brackets(s.split("sex")),
        ]
        for s in summaries
    ]
    frame = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    legend = (
        "Race: [Asian,Black,Caucasian,Hispanic,Other]  Age: [min,median,max]  "
        "Polyps/Drusen/SRH: [with,without]  Sex: [male,female]"
    )
    if frame.empty:
        return "No clusters\n"
    return frame.to_string(index=False) + "\n\n" + legend + "\n"


def purity_frame(report: PurityReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (attribute, report.attribute_purity[attribute], len(report.pure_clusters[attribute]))
            for attribute in PURITY_ATTRIBUTES
        ],
        columns=["attribute", "purity", "pure_clusters"],
    )


def composition_frame(report: PurityReport) -> pd.DataFrame:
    labels = {3: "all-three", 2: "two-disease", 1: "single-disease"}
    return pd.DataFrame(
        [(cid, n, labels.get(n, "none")) for cid, n in report.disease_composition],
        columns=["cluster", "diseases", "composition"],
    )


def render_purity(report: PurityReport, observations: Sequence[str] = ()) -> str:
    lines = ["Purity (share of clusters where one side holds every member):"]
    for attribute in PURITY_ATTRIBUTES:
        lines.append(f"  {attribute:<7} {report.attribute_purity[attribute]:.3f}")
    lines.append(
        f"Disease composition: {len(report.all_three)} all-three, "
        f"{len(report.two_disease)} two-disease, {len(report.single_disease)} single-disease"
    )
    if observations:
        lines.append("Observations:")
        lines.extend(f"  - {note}" for note in observations)
    return "\n".join(lines) + "\n"


def export_latent_scatter(latents: Sequence[LatentPoint]) -> Dict[str, pd.DataFrame]:
    """Per-disease point tables plus the composite, in the latents CSV schema.

    Keys: disease codes and 'composite'. Every disease gets a table even when
    it has no points.
    """
    exports = {
        disease.value: latents_to_frame([p for p in latents if p.disease == disease])
        for disease in DISEASES
    }
    exports["composite"] = latents_to_frame(list(latents))
    if not latents:
        return exports
    # header-only tables still need the z columns
    template = exports["composite"].columns
    for disease in DISEASES:
        if exports[disease.value].empty:
            exports[disease.value] = pd.DataFrame(columns=template)
    return exports


def export_data_model_figures(
    models: Mapping[Disease, DiseaseModel],
) -> Dict[str, pd.DataFrame]:
    """Tables behind the data-model figures.

    Returns:
        'race': disease x race probabilities; 'findings': per-disease
        probabilities of polyps, drusen, SRH and male sex; 'age_density':
        Normal densities on 0..110 years in 1-year steps (a zero-variance
        model has no density and is reported as zeros)
    """
    race = pd.DataFrame(
        [[d.value, *models[d].race_probs] for d in DISEASES],
        columns=["disease", *[r.name.lower() for r in Race]],
    )
    findings = pd.DataFrame(
        [
            [d.value, models[d].p_polyps, models[d].p_drusen, models[d].p_srh, models[d].p_male]
            for d in DISEASES
        ],
        columns=["disease", "polyps", "drusen", "srh", "male"],
    )
    density = {"age": AGE_GRID}
    for d in DISEASES:
        model = models[d]
        if model.age_var > 0:
            density[d.value] = norm.pdf(AGE_GRID, loc=model.age_mean, scale=math.sqrt(model.age_var))
        else:
            density[d.value] = np.zeros_like(AGE_GRID)
    return {
        "race": race,
        "findings": findings,
        "age_density": pd.DataFrame(density),
    }
