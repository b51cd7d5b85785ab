"""
Synthetic patient cohort generator.

Samples patient profile vectors (race, age, polyps, drusen, subretinal
hemorrhage, sex) from independent per-disease distributions and encodes them
as [0, 1]-normalized 6-dimensional feature vectors for the autoencoder.

Cohort CSV schema (UTF-8): id,disease,race,age,polyps,drusen,srh,sex
"""

import io
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pandas.errors import EmptyDataError, ParserError

from .exceptions import (
    CodecError,
    CohortParseError,
    ConfigurationError,
    EmptyCohortError,
    InvalidModelError,
    ValidationError,
)
from .output_handler import atomic_write_text


class Race(IntEnum):
    """Race categories with stable integer codes 0..4."""

    ASIAN = 0
    BLACK = 1
    CAUCASIAN = 2
    HISPANIC = 3
    OTHER = 4


class Disease(Enum):
    """Maculopathy label. Metadata only, never part of the model input."""

    ARMD = "ARMD"  # exudative age-related macular degeneration
    CSCR = "CSCR"  # central serous chorioretinopathy
    PCV = "PCV"    # polypoidal choroidal vasculopathy


DISEASES: Tuple[Disease, ...] = (Disease.ARMD, Disease.CSCR, Disease.PCV)

COHORT_COLUMNS = ["id", "disease", "race", "age", "polyps", "drusen", "srh", "sex"]
FEATURE_NAMES = ["race", "age", "polyps", "drusen", "srh", "sex"]
BINARY_FIELDS = ("polyps", "drusen", "srh", "sex")

DEFAULT_AGE_CAP = 110.0
PROBABILITY_TOLERANCE = 1e-9

# 1-D float array of length 6: [race_code, age_norm, polyps, drusen, srh, sex]
FeatureVec = np.ndarray


@dataclass(frozen=True)
class PVec:
    """One synthetic patient profile."""

    id: int
    disease: Optional[Disease]  # None for profiles decoded from the latent prior
    race: Race
    age: float
    polyps: int
    drusen: int
    srh: int
    sex: int  # 0 = female, 1 = male

    def __post_init__(self):
        if not (math.isfinite(self.age) and self.age > 0):
            raise ValidationError(
                f"Age must be a positive finite number, got {self.age}",
                context={"id": self.id, "age": self.age},
            )
        for name in BINARY_FIELDS:
            if getattr(self, name) not in (0, 1):
                raise ValidationError(
                    f"Field '{name}' must be 0 or 1, got {getattr(self, name)!r}",
                    context={"id": self.id, "field": name},
                )


@dataclass(frozen=True)
class DiseaseModel:
    """Sampling distribution parameters for one maculopathy."""

    age_mean: float
    age_var: float
    race_probs: Tuple[float, float, float, float, float]
    p_polyps: float
    p_drusen: float
    p_srh: float
    p_male: float

    def validate(self) -> None:
        """Check the model invariants.

        Raises:
            InvalidModelError: If any parameter is out of range
        """
        if not (math.isfinite(self.age_mean) and self.age_mean > 0):
            raise InvalidModelError(
                f"age_mean must be positive, got {self.age_mean}",
                context={"age_mean": self.age_mean},
            )
        if not (math.isfinite(self.age_var) and self.age_var >= 0):
            raise InvalidModelError(
                f"age_var must be non-negative, got {self.age_var}",
                context={"age_var": self.age_var},
            )
        if len(self.race_probs) != len(Race):
            raise InvalidModelError(
                f"race_probs must have {len(Race)} entries, got {len(self.race_probs)}",
                context={"race_probs": list(self.race_probs)},
            )
        check_probabilities(self.race_probs)
        for name in ("p_polyps", "p_drusen", "p_srh", "p_male"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise InvalidModelError(
                    f"{name} must lie in [0, 1], got {value}",
                    context={name: value},
                )


@dataclass(frozen=True)
class Cohort:
    """Ordered synthetic cohort.

    Equality compares records only; ``seed`` is provenance and is not stored
    in the CSV.
    """

    records: Tuple[PVec, ...]
    seed: Optional[int] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def per_disease_count(self) -> Optional[int]:
        """Records per disease when every disease has the same count, else None."""
        counts = set(cohort_counts(self).values())
        return counts.pop() if len(counts) == 1 else None

    def by_id(self) -> Dict[int, PVec]:
        return {record.id: record for record in self.records}


def default_disease_models() -> Dict[Disease, DiseaseModel]:
    """Return the default data model.

    Ages, race distributions, p_drusen for PCV/CSCR, p_srh for PCV and the
    uniform sex split for ARMD/PCV are fixed defaults.
    The remaining probabilities are estimates, all overridable through
    the pipeline config: p_drusen(ARMD)=0.90, p_polyps(PCV)=1.0,
    p_polyps(ARMD)=p_polyps(CSCR)=0.05, p_srh(ARMD)=0.30, p_srh(CSCR)=0.05
    and p_male(CSCR)=0.80 (a 4:1 male preponderance).
    """
    return {
        Disease.ARMD: DiseaseModel(
            age_mean=80.0,
            age_var=80.0,
            race_probs=(0.39, 0.01, 0.5, 0.05, 0.05),
            p_polyps=0.05,
            p_drusen=0.90,
            p_srh=0.30,
            p_male=0.5,
        ),
        Disease.CSCR: DiseaseModel(
            age_mean=39.0,
            age_var=60.0,
            race_probs=(0.33, 0.05, 0.32, 0.25, 0.05),
            p_polyps=0.05,
            p_drusen=0.10,
            p_srh=0.05,
            p_male=0.80,
        ),
        Disease.PCV: DiseaseModel(
            age_mean=60.0,
            age_var=40.0,
            race_probs=(0.4, 0.3, 0.10, 0.18, 0.02),
            p_polyps=1.0,
            p_drusen=0.28,
            p_srh=0.33,
            p_male=0.5,
        ),
    }


def load_disease_models(
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> Dict[Disease, DiseaseModel]:
    """Apply partial per-disease overrides to the default models.

    Args:
        overrides: e.g. {"CSCR": {"p_male": 0.75}}; keys are disease codes

    Returns:
        Validated models for every disease

    Raises:
        ConfigurationError: On unknown disease codes or field names
        InvalidModelError: If an overridden model violates its invariants
    """
    models = default_disease_models()
    valid_fields = {f.name for f in fields(DiseaseModel)}

    for code, values in (overrides or {}).items():
        try:
            disease = Disease(code)
        except ValueError:
            raise ConfigurationError(
                f"Unknown disease '{code}' in data.models",
                context={"key": f"data.models.{code}"},
            )
        unknown = sorted(set(values) - valid_fields)
        if unknown:
            raise ConfigurationError(
                f"Unknown DiseaseModel field(s) for {code}: {', '.join(unknown)}",
                context={"keys": [f"data.models.{code}.{k}" for k in unknown]},
            )
        patch = dict(values)
        if "race_probs" in patch:
            patch["race_probs"] = tuple(float(p) for p in patch["race_probs"])
        models[disease] = replace(models[disease], **patch)

    for model in models.values():
        model.validate()
    return models


def check_probabilities(probs: Sequence[float]) -> np.ndarray:
    """Validate a probability vector and return it as an array.

    Raises:
        InvalidModelError: On negative entries or a sum away from 1 by more than 1e-9
    """
    arr = np.asarray(probs, dtype=float)
    if arr.ndim != 1 or arr.size == 0 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvalidModelError(
            "Probability vector must be a non-empty vector of non-negative values",
            context={"probs": arr.tolist()},
        )
    if abs(arr.sum() - 1.0) > PROBABILITY_TOLERANCE:
        raise InvalidModelError(
            f"Probabilities must sum to 1, got {arr.sum()!r}",
            context={"probs": arr.tolist()},
        )
    return arr


def categorical_index(probs: Sequence[float], u: float) -> int:
    """Inverse-CDF lookup with half-open intervals [cum_i, cum_{i+1}).

    Args:
        probs: Probability vector summing to 1
        u: Uniform draw in [0, 1)

    Returns:
        Selected category index
    """
    cumulative = np.cumsum(check_probabilities(probs))
    index = int(np.searchsorted(cumulative, u, side="right"))
    # rounding can leave cumulative[-1] a hair below u
    return min(index, len(cumulative) - 1)


def sample_categorical(probs: Sequence[float], rng: np.random.Generator) -> int:
    """Draw a category index with probability probs[i] from one uniform draw."""
    return categorical_index(probs, rng.random())


def sample_bernoulli(p: float, rng: np.random.Generator) -> int:
    return int(rng.random() < p)


def sample_age(model: DiseaseModel, rng: np.random.Generator) -> float:
    """Draw an age from Normal(age_mean, age_var), redrawing until positive.

    Raises:
        InvalidModelError: If age_var is negative or age_mean is not positive
    """
    if model.age_var < 0:
        raise InvalidModelError(
            f"age_var must be non-negative, got {model.age_var}",
            context={"age_var": model.age_var},
        )
    if model.age_mean <= 0:
        raise InvalidModelError(
            f"age_mean must be positive, got {model.age_mean}",
            context={"age_mean": model.age_mean},
        )
    scale = math.sqrt(model.age_var)
    while True:
        age = float(rng.normal(model.age_mean, scale))
        if age > 0:
            return age


def sample_pvec(
    disease: Disease,
    model: DiseaseModel,
    rng: np.random.Generator,
    record_id: int = 0,
) -> PVec:
    """Sample one patient.

    Field order is fixed (age, race, polyps, drusen, srh, sex) so that a given
    generator state always yields the same patient.
    """
    model.validate()
    age = sample_age(model, rng)
    race = Race(sample_categorical(model.race_probs, rng))
    polyps = sample_bernoulli(model.p_polyps, rng)
    drusen = sample_bernoulli(model.p_drusen, rng)
    srh = sample_bernoulli(model.p_srh, rng)
    sex = sample_bernoulli(model.p_male, rng)
    return PVec(
        id=record_id,
        disease=disease,
        race=race,
        age=age,
        polyps=polyps,
        drusen=drusen,
        srh=srh,
        sex=sex,
    )


def generate_cohort(
    models: Mapping[Disease, DiseaseModel],
    per_disease_count: int,
    seed: int,
) -> Cohort:
    """Generate per_disease_count records for each disease, in ARMD, CSCR, PCV order.

    Each disease draws from its own child stream of SeedSequence(seed), so the
    cohort is a pure function of (models, per_disease_count, seed).

    Raises:
        EmptyCohortError: If per_disease_count < 1
    """
    if per_disease_count < 1:
        raise EmptyCohortError(
            f"per_disease_count must be at least 1, got {per_disease_count}",
            context={"per_disease_count": per_disease_count},
        )
    missing = [d.value for d in DISEASES if d not in models]
    if missing:
        raise InvalidModelError(
            f"No sampling model for: {', '.join(missing)}",
            context={"missing": missing},
        )

    streams = np.random.SeedSequence(seed).spawn(len(DISEASES))
    records = []
    for disease, stream in zip(DISEASES, streams):
        rng = np.random.default_rng(stream)
        model = models[disease]
        for _ in range(per_disease_count):
            records.append(sample_pvec(disease, model, rng, record_id=len(records)))
    return Cohort(records=tuple(records), seed=seed)


def cohort_counts(cohort: Cohort) -> Dict[Disease, int]:
    counts = {disease: 0 for disease in DISEASES}
    for record in cohort.records:
        counts[record.disease] += 1
    return counts


def encode_features(p: PVec, age_cap: float = DEFAULT_AGE_CAP) -> FeatureVec:
    """Encode a patient as [race/4, min(age, cap)/cap, polyps, drusen, srh, sex]."""
    if age_cap <= 0:
        raise ValidationError(f"age_cap must be positive, got {age_cap}")
    return np.array(
        [
            int(p.race) / 4.0,
            min(p.age, age_cap) / age_cap,
            float(p.polyps),
            float(p.drusen),
            float(p.srh),
            float(p.sex),
        ],
        dtype=float,
    )


def encode_cohort(cohort: Cohort, age_cap: float = DEFAULT_AGE_CAP) -> np.ndarray:
    """Stack encoded features into an (N, 6) matrix in record order."""
    if not cohort.records:
        return np.zeros((0, len(FEATURE_NAMES)))
    return np.vstack([encode_features(p, age_cap) for p in cohort.records])


def decode_features(
    x: FeatureVec,
    age_cap: float = DEFAULT_AGE_CAP,
    disease: Optional[Disease] = None,
    record_id: int = 0,
) -> PVec:
    """Invert encode_features.

    Race snaps to the nearest code (ties round down), age is rescaled and
    binaries are thresholded at 0.5 (0.5 itself decodes to 1). The disease
    label is not part of the features; pass it through when known.

    An age component of exactly 0 lies inside [0, 1] but decodes to a
    non-positive age, which no PVec can hold, so it is rejected too.

    Raises:
        CodecError: If a component lies outside [0, 1] or the age decodes to 0
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (len(FEATURE_NAMES),):
        raise CodecError(f"Feature vector must have shape (6,), got {x.shape}")
    if not np.all(np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise CodecError(
            "Feature components must lie in [0, 1]",
            context={"features": x.tolist()},
        )

    race_index = int(math.ceil(x[0] * 4.0 - 0.5))
    binaries = [int(value >= 0.5) for value in x[2:]]
    try:
        return PVec(
            id=record_id,
            disease=disease,
            race=Race(race_index),
            age=float(x[1] * age_cap),
            polyps=binaries[0],
            drusen=binaries[1],
            srh=binaries[2],
            sex=binaries[3],
        )
    except ValidationError as exc:
        raise CodecError(f"Cannot decode features: {exc.message}", context=exc.context)


def _format_age(age: float) -> str:
    # at least 6 significant digits, and always round-trip exact
    padded = "%#.6g" % age
    return padded if float(padded) == age else repr(age)


def cohort_to_frame(cohort: Cohort) -> pd.DataFrame:
    """Render the cohort as string columns in CSV schema order."""
    rows = [
        {
            "id": str(p.id),
            "disease": p.disease.value if p.disease else "",
            "race": p.race.name,
            "age": _format_age(p.age),
            "polyps": str(p.polyps),
            "drusen": str(p.drusen),
            "srh": str(p.srh),
            "sex": str(p.sex),
        }
        for p in cohort.records
    ]
    return pd.DataFrame(rows, columns=COHORT_COLUMNS)


def cohort_to_csv(cohort: Cohort) -> str:
    buffer = io.StringIO()
    cohort_to_frame(cohort).to_csv(buffer, index=False, lineterminator="\n")
    return buffer.getvalue()


def write_cohort(path: Union[str, Path], cohort: Cohort) -> Path:
    """Write the cohort CSV atomically and return its path."""
    return atomic_write_text(Path(path), cohort_to_csv(cohort))


def _parse_row(row: Mapping[str, str], line: int) -> PVec:
    def fail(reason: str) -> CohortParseError:
        return CohortParseError(
            f"Line {line}: {reason}",
            context={"line": line, "row": dict(row)},
        )

    raw_id = row["id"].strip()
    if not raw_id.isdigit():
        raise fail(f"id must be a non-negative integer, got {row['id']!r}")

    try:
        disease = Disease(row["disease"].strip())
    except ValueError:
        raise fail(f"unknown disease {row['disease']!r}")

    race_name = row["race"].strip()
    if race_name not in Race.__members__:
        raise fail(f"unknown race {row['race']!r}")

    try:
        age = float(row["age"])
    except ValueError:
        raise fail(f"age is not a number: {row['age']!r}")

    binaries = {}
    for name in BINARY_FIELDS:
        value = row[name].strip()
        if value not in ("0", "1"):
            raise fail(f"{name} must be 0 or 1, got {row[name]!r}")
        binaries[name] = int(value)

    try:
        return PVec(
            id=int(raw_id),
            disease=disease,
            race=Race[race_name],
            age=age,
            **binaries,
        )
    except ValidationError as exc:
        raise fail(exc.message)


def read_cohort(path: Union[str, Path]) -> Cohort:
    """Read a cohort CSV written by write_cohort.

    A header-only file yields an empty cohort.

    Raises:
        CohortParseError: On a wrong header or a malformed row (names the line)
    """
    path = Path(path)
    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            na_filter=False,
            skip_blank_lines=False,
            encoding="utf-8",
        )
    except EmptyDataError:
        raise CohortParseError(
            f"Line 1: missing header in {path}",
            context={"line": 1, "path": str(path)},
        )
    except ParserError as exc:
        raise CohortParseError(
            f"Malformed cohort CSV {path}: {exc}",
            context={"path": str(path)},
        )

    if list(frame.columns) != COHORT_COLUMNS:
        raise CohortParseError(
            f"Line 1: expected header {','.join(COHORT_COLUMNS)}",
            context={"line": 1, "header": list(frame.columns), "path": str(path)},
        )

    records = []
    seen = set()
    for offset, row in enumerate(frame.to_dict(orient="records")):
        line = offset + 2
        record = _parse_row(row, line)
        if record.id in seen:
            raise CohortParseError(
                f"Line {line}: duplicate id {record.id}",
                context={"line": line, "id": record.id},
            )
        seen.add(record.id)
        records.append(record)
    return Cohort(records=tuple(records))
