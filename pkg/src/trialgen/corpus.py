"""Trial corpora: synthesis with exact relation ground truth, registry ingest,
splits, the pretraining sample builder, and instruction-criterion pairs.

Synthetic corpora are the evaluation bedrock: every criterion is realized from
a surface template whose relation is recorded at generation time, so the
criteria parser has a 100% oracle. Surfaces are sampled once per (disease,
attribute), which gives held-out trials the same learnable regularities as the
training trials.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from .criteria_parser import AttributeSchema, Relation, default_schema
from .rng import make_rng

log = logging.getLogger(__name__)

REQUIRED_ATTRIBUTES = (
    "age", "bmi", "gender", "hba1c", "nyha", "sbp", "qtc", "egfr",
    "life_expectancy", "pregnancy", "ecog", "hemoglobin",
)

DISEASES = (
    "Type 2 Diabetes Mellitus",
    "Non-small-cell Lung Cancer",
    "Chronic Heart Failure",
    "Rheumatoid Arthritis",
    "Major Depressive Disorder",
    "Chronic Kidney Disease",
    "Alzheimer Disease",
    "Metastatic Breast Cancer",
    "Chronic Obstructive Pulmonary Disease",
    "Atrial Fibrillation",
    "Ulcerative Colitis",
    "Plaque Psoriasis",
)

PHASES = ("1", "1b", "2", "2b", "3", "4")
TREATMENT_FORMS = ("tablets", "capsules", "injection", "infusion")

_DRUG_HEADS = (
    "velo", "mari", "zoni", "cabo", "luteri", "pexa", "orva", "quini",
    "tafa", "nebi", "ralto", "sevi", "dola", "ibru", "osi", "lenva",
)
_DRUG_TAILS = (
    "tinib", "zumab", "stat", "ciclib", "parin", "gliflozin", "prazole",
    "sartan", "oxetine", "glutide", "navir", "mer",
)


class ConfigurationError(ValueError):
    pass


@dataclass
class Criterion:
    text: str
    polarity: str  # "inclusion" | "exclusion"
    attribute: Optional[str] = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("criterion text must be nonempty")
        if self.polarity not in ("inclusion", "exclusion"):
            raise ValueError(f"bad polarity {self.polarity!r}")


@dataclass
class TrialDocument:
    trial_id: str
    title: str
    disease: str
    treatment: str
    inclusion: list
    exclusion: list
    gold_relations: set = field(default_factory=set)

    @property
    def criteria(self) -> list:
        """All criteria in document order (inclusion first)."""
        return list(self.inclusion) + list(self.exclusion)


@dataclass
class Exemplar:
    """A (criteria chain, instruction, target) demonstration triple.

    Pretraining exemplars carry only the chain; retrieved exemplars carry all
    three components.
    """

    chain: list
    instruction: Optional[str] = None
    target: Optional[Criterion] = None


@dataclass
class PretrainSample:
    trial: TrialDocument
    exemplar: Exemplar
    rationale: list
    target: Criterion


@dataclass
class InstructionCriterionPair:
    trial_id: str
    instruction: str
    target: Criterion
    rationale_chain: list

    def __post_init__(self):
        if self.target.attribute != self.instruction:
            raise ValueError("pair target attribute must equal its instruction")
        if any(c is self.target for c in self.rationale_chain):
            raise ValueError("pair target may not appear in its rationale chain")


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list
    seed: int

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"train": self.train, "valid": self.valid, "test": self.test,
                 "seed": self.seed},
                fh, indent=2,
            )
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "DatasetSplit":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(d["train"], d["valid"], d["test"], d["seed"])


@dataclass
class SynthConfig:
    n_trials: int
    seed: int
    attribute_lexicon: tuple = REQUIRED_ATTRIBUTES
    diseases: tuple = DISEASES


def _fmt(v: float) -> str:
    return str(int(v)) if float(v) == int(v) else str(v)


def _in_set(tag: str, labels) -> Relation:
    return Relation(tag, "in_set", tuple(sorted(set(labels))))


# One entry per surface template: (class, render(values) -> text,
# relation(values) -> Relation, sample(rng) -> values).
def _template_table() -> dict:
    t = {}

    def age_range(rng):
        return tuple(float(x) for x in rng.choice([(18, 65), (18, 75), (21, 70), (40, 75)]))

    t["age"] = [
        ("short",
         lambda v: f"age is above {_fmt(v)} yrs old",
         lambda v: Relation("age", ">", (float(v),), "years"),
         lambda rng: float(rng.choice([18, 21, 40, 50, 60, 65, 70, 75]))),
        ("short",
         lambda v: f"age {_fmt(v)} years or older",
         lambda v: Relation("age", ">=", (float(v),), "years"),
         lambda rng: float(rng.choice([18, 21, 45, 55, 60, 65]))),
        ("long",
         lambda v: (
             f"participants must be aged between {_fmt(v[0])} and {_fmt(v[1])} years"
             " at the time of signing the informed consent form for this study"
         ),
         lambda v: Relation("age", "in_range", (float(v[0]), float(v[1])), "years"),
         age_range),
        ("short",
         lambda v: f"aged at least {_fmt(v)} years at screening",
         lambda v: Relation("age", ">=", (float(v),), "years"),
         lambda rng: float(rng.choice([18, 40, 50, 70]))),
    ]

    def bmi_range(rng):
        return tuple(float(x) for x in rng.choice([(18, 30), (19, 35), (20, 40), (20, 45), (22, 38)]))

    t["bmi"] = [
        ("short",
         lambda v: f"Body mass index (BMI) within the range of {_fmt(v[0])}-{_fmt(v[1])} kg/m2",
         lambda v: Relation("bmi", "in_range", (float(v[0]), float(v[1])), "kg/m2"),
         bmi_range),
        ("short",
         lambda v: f"bmi of {_fmt(v[0])}-{_fmt(v[1])} kg/m2",
         lambda v: Relation("bmi", "in_range", (float(v[0]), float(v[1])), "kg/m2"),
         bmi_range),
        ("long",
         lambda v: (
             f"Body mass index (BMI) within the range of {_fmt(v[0])}-{_fmt(v[1])} kg/m2"
             " inclusive, calculated as weight in kilograms divided by the square"
             " of height in meters"
         ),
         lambda v: Relation("bmi", "in_range", (float(v[0]), float(v[1])), "kg/m2"),
         bmi_range),
        ("short",
         lambda v: f"bmi above {_fmt(v)} kg/m2",
         lambda v: Relation("bmi", ">", (float(v),), "kg/m2"),
         lambda rng: float(rng.choice([30, 35, 40]))),
    ]

    t["gender"] = [
        ("short",
         lambda v: "male or female participants",
         lambda v: _in_set("gender", ("female", "male")),
         lambda rng: None),
        ("short",
         lambda v: "female participants only",
         lambda v: _in_set("gender", ("female",)),
         lambda rng: None),
        ("short",
         lambda v: "male participants only",
         lambda v: _in_set("gender", ("male",)),
         lambda rng: None),
        ("long",
         lambda v: (
             "male and female participants are eligible for this study provided"
             " that all entry requirements are satisfied at the screening visit"
         ),
         lambda v: _in_set("gender", ("female", "male")),
         lambda rng: None),
    ]

    t["hba1c"] = [
        ("short",
         lambda v: f"hba1c below {_fmt(v)} %",
         lambda v: Relation("hba1c", "<", (float(v),), "%"),
         lambda rng: float(rng.choice([8.0, 8.5, 9.0, 10.0]))),
        ("short",
         lambda v: f"hba1c within the range of {_fmt(v[0])}-{_fmt(v[1])} %",
         lambda v: Relation("hba1c", "in_range", (float(v[0]), float(v[1])), "%"),
         lambda rng: tuple(float(x) for x in rng.choice([(6.5, 10.0), (7.0, 10.0), (7.0, 9.0), (7.5, 10.5)]))),
        ("long",
         lambda v: (
             f"hba1c value of {_fmt(v[0])} to {_fmt(v[1])} % inclusive at the"
             " screening visit, as measured by the central laboratory for this trial"
         ),
         lambda v: Relation("hba1c", "in_range", (float(v[0]), float(v[1])), "%"),
         lambda rng: tuple(float(x) for x in rng.choice([(6.5, 10.0), (7.0, 10.0), (7.0, 9.5)]))),
    ]

    nyha_labels = ("i", "ii", "iii", "iv")

    t["nyha"] = [
        ("short",
         lambda v: f"NYHA class is above {v.upper()}",
         lambda v: _in_set("nyha", nyha_labels[nyha_labels.index(v) + 1 :]),
         lambda rng: str(rng.choice(["i", "ii", "iii"]))),
        ("short",
         lambda v: f"heart failure (NYHA class {v[0].upper()} and {v[1].upper()})",
         lambda v: _in_set("nyha", v),
         lambda rng: tuple(str(x) for x in rng.choice([("iii", "iv"), ("ii", "iii")]))),
        ("long",
         lambda v: (
             "patients with congestive heart failure of new york heart association"
             f" (NYHA) class {v[0].upper()} or {v[1].upper()} at the screening assessment"
         ),
         lambda v: _in_set("nyha", v),
         lambda rng: tuple(str(x) for x in rng.choice([("iii", "iv"), ("ii", "iii")]))),
    ]

    t["sbp"] = [
        ("short",
         lambda v: f"systolic blood pressure ≥ {_fmt(v)} mmHg at screening",
         lambda v: Relation("sbp", ">=", (float(v),), "mmHg"),
         lambda rng: float(rng.choice([140, 150, 160]))),
        ("short",
         lambda v: f"sbp below {_fmt(v)} mmHg",
         lambda v: Relation("sbp", "<", (float(v),), "mmHg"),
         lambda rng: float(rng.choice([90, 100]))),
        ("long",
         lambda v: (
             "uncontrolled hypertension defined as systolic blood pressure above"
             f" {_fmt(v)} mmHg on two or more consecutive measurements taken at rest"
         ),
         lambda v: Relation("sbp", ">", (float(v),), "mmHg"),
         lambda rng: float(rng.choice([160, 180]))),
    ]

    t["qtc"] = [
        ("short",
         lambda v: f"QTc interval ≥ {_fmt(v)} ms",
         lambda v: Relation("qtc", ">=", (float(v),), "ms"),
         lambda rng: float(rng.choice([450, 470, 480]))),
        ("short",
         lambda v: f"QTc > {_fmt(v)} ms on the screening ecg",
         lambda v: Relation("qtc", ">", (float(v),), "ms"),
         lambda rng: float(rng.choice([450, 470, 500]))),
        ("long",
         lambda v: (
             f"corrected qt interval (QTc) greater than {_fmt(v)} ms on the screening"
             " electrocardiogram using the fridericia correction formula"
         ),
         lambda v: Relation("qtc", ">", (float(v),), "ms"),
         lambda rng: float(rng.choice([450, 480, 500]))),
    ]

    t["egfr"] = [
        ("short",
         lambda v: f"eGFR ≥ {_fmt(v)} at screening",
         lambda v: Relation("egfr", ">=", (float(v),)),
         lambda rng: float(rng.choice([30, 45, 60, 90]))),
        ("short",
         lambda v: f"eGFR below {_fmt(v)}",
         lambda v: Relation("egfr", "<", (float(v),)),
         lambda rng: float(rng.choice([30, 45]))),
        ("long",
         lambda v: (
             f"estimated glomerular filtration rate (eGFR) of at least {_fmt(v)} as"
             " calculated by the ckd-epi equation at the screening visit"
         ),
         lambda v: Relation("egfr", ">=", (float(v),)),
         lambda rng: float(rng.choice([30, 45, 60]))),
    ]

    t["life_expectancy"] = [
        ("short",
         lambda v: f"life expectancy ≥ {_fmt(v)} weeks",
         lambda v: Relation("life_expectancy", ">=", (float(v),), "weeks"),
         lambda rng: float(rng.choice([12, 24, 26, 52]))),
        ("short",
         lambda v: f"life expectancy of at least {_fmt(v)} weeks",
         lambda v: Relation("life_expectancy", ">=", (float(v),), "weeks"),
         lambda rng: float(rng.choice([12, 24, 26]))),
        ("long",
         lambda v: (
             f"estimated life expectancy of at least {_fmt(v)} weeks in the judgment"
             " of the treating investigator at the time of study enrollment"
         ),
         lambda v: Relation("life_expectancy", ">=", (float(v),), "weeks"),
         lambda rng: float(rng.choice([12, 26, 52]))),
    ]

    t["pregnancy"] = [
        ("short",
         lambda v: "pregnant or breastfeeding women",
         lambda v: Relation("pregnancy", "boolean"),
         lambda rng: None),
        ("short",
         lambda v: "positive pregnancy test at screening",
         lambda v: Relation("pregnancy", "boolean"),
         lambda rng: None),
        ("long",
         lambda v: (
             "women who are pregnant or planning to become pregnant during the"
             " course of the study, or who are currently breastfeeding an infant"
         ),
         lambda v: Relation("pregnancy", "boolean"),
         lambda rng: None),
    ]

    ecog_labels = ("0", "1", "2", "3", "4")

    t["ecog"] = [
        ("short",
         lambda v: f"ECOG performance status {v[0]} or {v[1]}",
         lambda v: _in_set("ecog", v),
         lambda rng: tuple(str(x) for x in rng.choice([("0", "1"), ("1", "2")]))),
        ("short",
         lambda v: f"ECOG performance status of {v[0]}-{v[1]}",
         lambda v: _in_set("ecog", ecog_labels[int(v[0]) : int(v[1]) + 1]),
         lambda rng: tuple(str(x) for x in rng.choice([("0", "1"), ("0", "2"), ("0", "3")]))),
        ("long",
         lambda v: (
             "eastern cooperative oncology group (ECOG) performance status of"
             f" {v[0]} or {v[1]}, assessed within two weeks prior to registration"
         ),
         lambda v: _in_set("ecog", v),
         lambda rng: tuple(str(x) for x in rng.choice([("0", "1"), ("1", "2")]))),
    ]

    t["hemoglobin"] = [
        ("short",
         lambda v: f"hemoglobin ≥ {_fmt(v)} g/dL",
         lambda v: Relation("hemoglobin", ">=", (float(v),), "g/dL"),
         lambda rng: float(rng.choice([8.0, 8.5, 9.0, 10.0, 11.0]))),
        ("short",
         lambda v: f"hemoglobin below {_fmt(v)} g/dL",
         lambda v: Relation("hemoglobin", "<", (float(v),), "g/dL"),
         lambda rng: float(rng.choice([8.0, 9.0, 10.0]))),
        ("long",
         lambda v: (
             f"hemoglobin level of at least {_fmt(v)} g/dL without transfusion"
             " support within the two weeks preceding the screening visit"
         ),
         lambda v: Relation("hemoglobin", ">=", (float(v),), "g/dL"),
         lambda rng: float(rng.choice([8.5, 9.0, 10.0]))),
    ]

    return t


_INCLUSION_LEANING = frozenset(
    ("age", "bmi", "gender", "hba1c", "life_expectancy", "ecog", "hemoglobin", "egfr")
)


def disease_attribute_profile(config: SynthConfig) -> dict:
    """Per-(disease, attribute) realization shared by every trial of a disease.

    Returns {(disease, tag): {"polarity", "template_class", "text", "relation"}}.
    Tests use this to recover the exact gold surface for any synthetic criterion.
    """
    templates = _template_table()
    rng = make_rng(config.seed, "synth", "profile")
    profile = {}
    for disease in config.diseases:
        n_inc = int(rng.integers(7, 9))
        weights = [4.0 if a in _INCLUSION_LEANING else 1.0 for a in config.attribute_lexicon]
        total = sum(weights)
        inc_pool = set(
            rng.choice(
                list(config.attribute_lexicon), size=n_inc, replace=False,
                p=[w / total for w in weights],
            )
        )
        for tag in config.attribute_lexicon:
            cls, render, rel, sample = templates[tag][int(rng.integers(len(templates[tag])))]
            values = sample(rng)
            profile[(disease, tag)] = {
                "polarity": "inclusion" if tag in inc_pool else "exclusion",
                "template_class": cls,
                "text": render(values),
                "relation": rel(values),
            }
    return profile


def synthesize_corpus(config: SynthConfig) -> list:
    """Deterministic synthetic corpus with recorded gold relations."""
    if config.n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    missing = [a for a in REQUIRED_ATTRIBUTES if a not in config.attribute_lexicon]
    if missing:
        raise ConfigurationError(f"attribute lexicon missing {missing}")
    unknown = [a for a in config.attribute_lexicon if a not in _template_table()]
    if unknown:
        raise ConfigurationError(f"no templates for attributes {unknown}")

    profile = disease_attribute_profile(config)
    rng = make_rng(config.seed, "synth", "trials")
    trials = []
    for i in range(config.n_trials):
        disease = str(rng.choice(DISEASES if config.diseases is DISEASES else list(config.diseases)))
        drug = (
            str(rng.choice(_DRUG_HEADS)) + str(rng.choice(_DRUG_TAILS))
        ).capitalize()
        phase = str(rng.choice(PHASES))
        form = str(rng.choice(TREATMENT_FORMS))
        title = f"A Phase {phase} Study of {drug} in {disease}"
        treatment = f"{drug} {form}"

        inc_pool = [a for a in config.attribute_lexicon
                    if profile[(disease, a)]["polarity"] == "inclusion"]
        exc_pool = [a for a in config.attribute_lexicon
                    if profile[(disease, a)]["polarity"] == "exclusion"]
        n_inc = int(rng.integers(3, min(8, len(inc_pool)) + 1))
        n_exc = int(rng.integers(2, min(6, len(exc_pool)) + 1))
        inc_attrs = [str(a) for a in rng.choice(inc_pool, size=n_inc, replace=False)]
        exc_attrs = [str(a) for a in rng.choice(exc_pool, size=n_exc, replace=False)]

        inclusion, exclusion, gold = [], [], set()
        for tag in inc_attrs:
            entry = profile[(disease, tag)]
            inclusion.append(Criterion(entry["text"], "inclusion", tag))
            gold.add(entry["relation"])
        for tag in exc_attrs:
            entry = profile[(disease, tag)]
            exclusion.append(Criterion(entry["text"], "exclusion", tag))
            gold.add(entry["relation"])

        trials.append(
            TrialDocument(
                trial_id=f"SYN{i:05d}",
                title=title,
                disease=disease,
                treatment=treatment,
                inclusion=inclusion,
                exclusion=exclusion,
                gold_relations=gold,
            )
        )
    return trials


def save_corpus(trials, path) -> None:
    """One trial per line, UTF-8 JSON records."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            rec = {
                "trial_id": t.trial_id,
                "title": t.title,
                "disease": t.disease,
                "treatment": t.treatment,
                "inclusion": [
                    {"text": c.text, "attribute": c.attribute} for c in t.inclusion
                ],
                "exclusion": [
                    {"text": c.text, "attribute": c.attribute} for c in t.exclusion
                ],
                "gold_relations": sorted(
                    (r.to_dict() for r in t.gold_relations),
                    key=lambda d: (d["attribute"], d["comparator"], str(d["values"])),
                ),
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_corpus(path) -> list:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            trials.append(
                TrialDocument(
                    trial_id=rec["trial_id"],
                    title=rec["title"],
                    disease=rec["disease"],
                    treatment=rec["treatment"],
                    inclusion=[
                        Criterion(c["text"], "inclusion", c.get("attribute"))
                        for c in rec["inclusion"]
                    ],
                    exclusion=[
                        Criterion(c["text"], "exclusion", c.get("attribute"))
                        for c in rec["exclusion"]
                    ],
                    gold_relations={
                        Relation.from_dict(d) for d in rec.get("gold_relations", [])
                    },
                )
            )
    ids = [t.trial_id for t in trials]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate trial_id in corpus file")
    return trials


_INC_HEADER = ("inclusion criteria", "inclusion:")
_EXC_HEADER = ("exclusion criteria", "exclusion:")


def _split_eligibility(text: str) -> tuple:
    inclusion, exclusion = [], []
    mode = "inclusion"
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        lowered = line.lower().rstrip(":")
        if any(lowered.startswith(h.rstrip(":")) for h in _INC_HEADER):
            mode = "inclusion"
            continue
        if any(lowered.startswith(h.rstrip(":")) for h in _EXC_HEADER):
            mode = "exclusion"
            continue
        item = line.lstrip("-*• ").lstrip("0123456789.)  ").strip()
        if not item:
            continue
        (inclusion if mode == "inclusion" else exclusion).append(item)
    return inclusion, exclusion


def ingest_registry(path) -> list:
    """Read a line-delimited registry export, applying the validity filters.

    Records without a title, condition, or intervention, or with a void
    eligibility block, are dropped. Malformed lines are skipped with a warning.
    """
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                log.warning("skipping malformed line %d: %s", lineno, exc)
                continue
            title = (rec.get("title") or "").strip()
            condition = (rec.get("condition") or "").strip()
            intervention = (rec.get("intervention") or "").strip()
            eligibility = rec.get("eligibility") or ""
            if not (title and condition and intervention):
                continue
            inclusion, exclusion = _split_eligibility(eligibility)
            if not inclusion and not exclusion:
                continue
            trials.append(
                TrialDocument(
                    trial_id=rec.get("trial_id") or f"ingest-{lineno:05d}",
                    title=title,
                    disease=condition,
                    treatment=intervention,
                    inclusion=[Criterion(t, "inclusion") for t in inclusion],
                    exclusion=[Criterion(t, "exclusion") for t in exclusion],
                )
            )
    if not trials:
        raise ValueError("no valid trials in registry export")
    return trials


def split_corpus(trials, ratios, seed: int) -> DatasetSplit:
    """Largest-remainder split of trial ids, deterministic under seed."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    ids = [t.trial_id for t in trials]
    order = make_rng(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    raw = [r * n for r in ratios]
    sizes = [int(x) for x in raw]
    remainders = sorted(
        range(3), key=lambda i: (-(raw[i] - sizes[i]), i)
    )
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1
    train = sorted(shuffled[: sizes[0]])
    valid = sorted(shuffled[sizes[0] : sizes[0] + sizes[1]])
    test = sorted(shuffled[sizes[0] + sizes[1] :])
    return DatasetSplit(train, valid, test, seed)


def select_trials(trials, ids) -> list:
    wanted = set(ids)
    return [t for t in trials if t.trial_id in wanted]


def build_pretrain_set(trials, seed: int, exemplar_chain_len: int = 3,
                       rationale_cap: Optional[int] = None,
                       samples_per_trial: Optional[int] = None) -> list:
    """One sample per (trial, target criterion), exemplars from the same trial.

    Trials with a single criterion contribute nothing. ``samples_per_trial``
    caps how many targets are drawn per trial (None = every criterion).
    """
    rng = make_rng(seed, "pretrain_set")
    samples = []
    for trial in trials:
        criteria = trial.criteria
        if len(criteria) < 2:
            log.info("trial %s has one criterion, no pretrain samples", trial.trial_id)
            continue
        target_idx = list(range(len(criteria)))
        if samples_per_trial is not None and samples_per_trial < len(target_idx):
            chosen = rng.choice(len(target_idx), size=samples_per_trial, replace=False)
            target_idx = sorted(int(i) for i in chosen)
        for ti in target_idx:
            others = [c for j, c in enumerate(criteria) if j != ti]
            k = min(exemplar_chain_len, len(others))
            picked = sorted(int(i) for i in rng.choice(len(others), size=k, replace=False))
            chain = [others[j] for j in picked]
            rationale = others if rationale_cap is None else others[:rationale_cap]
            samples.append(
                PretrainSample(
                    trial=trial,
                    exemplar=Exemplar(chain=chain),
                    rationale=rationale,
                    target=criteria[ti],
                )
            )
    return samples


def extract_pairs(trials, schema: Optional[AttributeSchema] = None,
                  rationale_cap: Optional[int] = None) -> list:
    """Instruction-criterion pairs for every criterion the parser can label.

    With a rationale cap, chain lengths are varied deterministically per pair
    in [0, cap] so the model also sees targets that open immediately after
    the instruction block (the shape criteria-level decoding produces).
    """
    from .criteria_parser import parse_criterion
    from .rng import derive_seed

    schema = schema or default_schema()
    pairs = []
    skipped = 0
    for trial in trials:
        criteria = trial.criteria
        for idx, criterion in enumerate(criteria):
            relations = parse_criterion(criterion.text, schema)
            if not relations:
                skipped += 1
                continue
            if criterion.attribute and any(
                r.attribute == criterion.attribute for r in relations
            ):
                instruction = criterion.attribute
            else:
                instruction = sorted(r.attribute for r in relations)[0]
            if criterion.attribute is None:
                criterion.attribute = instruction
            chain = [c for j, c in enumerate(criteria) if j != idx]
            if rationale_cap is not None:
                length = derive_seed(0, trial.trial_id, instruction) % (rationale_cap + 1)
                chain = chain[:length]
            pairs.append(
                InstructionCriterionPair(
                    trial_id=trial.trial_id,
                    instruction=instruction,
                    target=criterion,
                    rationale_chain=chain,
                )
            )
    if skipped:
        log.info("extract_pairs skipped %d unparsable criteria", skipped)
    return pairs
