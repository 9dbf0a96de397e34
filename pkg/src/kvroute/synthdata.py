"""Template datasets, answer tags, answer-span alignment and JSONL ingestion."""
from __future__ import annotations

import json
import statistics
import string
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kvroute.metrics import DEFAULT_UNKNOWN_MARKERS, is_unknown

TASKS = ("base", "knowledge", "multi_presence", "multi_entity", "long_context", "coreference", "hops")
ANSWER_TAGS = ("Person", "Thing", "Organization", "Creature", "Location", "Numerals", "DateTime", "Event")
QUESTION_TAGS = ("Standard", "Manipulated", "Part")
DIRECTIONS = ("forward", "reverse")
LLM_GENERATED = {"base", "multi_presence", "multi_entity", "long_context", "hops"}
UNKNOWN_GOLD = "I don't know"
MAX_HOP = 3

SLOT_TAGS = {
    "first_name": "Person",
    "last_name": "Person",
    "full_name": "Person",
    "date": "DateTime",
    "month": "DateTime",
    "year": "Numerals",
    "university": "Organization",
    "occupation": "Thing",
    "city": "Location",
    "location": "Location",
}


class GroundingError(ValueError):
    """Gold answer does not occur in the passage."""


class DatasetValidationError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{len(problems)} invalid dataset line(s): {lines}{more}")


def tokenize(text: str) -> list[str]:
    """Whitespace tokens with surrounding punctuation stripped; case is kept."""
    out = []
    for raw in text.split():
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


def align_answer_span(passage: str, gold: str) -> tuple[int, ...]:
    """Token positions of every exact occurrence of ``gold`` in ``passage``."""
    if is_unknown(gold, DEFAULT_UNKNOWN_MARKERS):
        raise ValueError("unknown-marker gold has no answer span")
    words, target = tokenize(passage), tokenize(gold)
    if not target:
        raise GroundingError("gold answer has no tokens")
    n = len(target)
    positions: set[int] = set()
    for start in range(len(words) - n + 1):
        if words[start:start + n] == target:
            positions.update(range(start, start + n))
    if not positions:
        raise GroundingError(f"gold {gold!r} not found in passage")
    return tuple(sorted(positions))


@dataclass(frozen=True)
class QAPair:
    question: str
    gold: str
    answer_tag: str
    question_tag: str
    direction: str
    hop_index: int | None = None
    t_ans: tuple[int, ...] = ()

    def __post_init__(self):
        if self.answer_tag not in ANSWER_TAGS:
            raise ValueError(f"unknown answer tag {self.answer_tag!r}")
        if self.question_tag not in QUESTION_TAGS:
            raise ValueError(f"unknown question tag {self.question_tag!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def unknown(self) -> bool:
        return is_unknown(self.gold)

    def to_json(self) -> dict:
        doc = {"question": self.question, "gold": self.gold, "answer_tag": self.answer_tag,
               "question_tag": self.question_tag, "direction": self.direction}
        if self.hop_index is not None:
            doc["hop_index"] = self.hop_index
        return doc


@dataclass(frozen=True)
class SynthExample:
    id: str
    task: str
    passage: str
    qa_pairs: tuple[QAPair, ...]

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.passage)

    @property
    def word_count(self) -> int:
        return len(self.passage.split())

    def to_json(self) -> dict:
        return {"id": self.id, "task": self.task, "passage": self.passage,
                "qa": [qa.to_json() for qa in self.qa_pairs]}


def _ground(passage: str, pairs: Iterable[QAPair]) -> tuple[QAPair, ...]:
    out = []
    for qa in pairs:
        out.append(qa if qa.unknown else replace(qa, t_ans=align_answer_span(passage, qa.gold)))
    return tuple(out)


@dataclass(frozen=True)
class EntityPool:
    first_names: tuple[str, ...]
    last_names: tuple[str, ...]
    months: tuple[str, ...]
    years: tuple[int, int]
    universities: tuple[str, ...]
    occupations: tuple[str, ...]
    cities: tuple[str, ...]
    locations: tuple[str, ...]
    genders: tuple[tuple[str, str, str], ...]  # (gender word, subject pronoun, possessive)

    def __post_init__(self):
        for name in ("first_names", "last_names", "months", "universities", "occupations",
                     "cities", "locations", "genders"):
            if not getattr(self, name):
                raise ValueError(f"entity pool slot {name!r} is empty")
        if self.years[0] > self.years[1]:
            raise ValueError("year range is inverted")

    def sample(self, rng: np.random.Generator) -> dict[str, str]:
        def pick(values):
            return values[int(rng.integers(len(values)))]

        month = pick(self.months)
        year = str(int(rng.integers(self.years[0], self.years[1] + 1)))
        day = str(int(rng.integers(1, 29)))
        gender, pronoun, possessive = pick(self.genders)
        first, last = pick(self.first_names), pick(self.last_names)
        return {
            "first_name": first, "last_name": last, "full_name": f"{first} {last}",
            "month": month, "year": year, "date": f"{month} {day}, {year}",
            "university": pick(self.universities), "occupation": pick(self.occupations),
            "city": pick(self.cities), "location": pick(self.locations),
            "gender": gender, "pronoun": pronoun, "possessive": possessive,
        }


DEFAULT_POOL = EntityPool(
    first_names=("Cora", "Xena", "Julian", "Mira", "Tobias", "Lena", "Oskar", "Priya", "Dario",
                 "Elif", "Hugo", "Nadia", "Ravi", "Selma", "Teodor", "Yara", "Anton", "Ines",
                 "Kofi", "Lucia", "Matteo", "Noor", "Pavel", "Rosa", "Soren", "Talia", "Viktor",
                 "Wren", "Zofia", "Emeka"),
    last_names=("Delaine", "Bell", "Foster", "Okafor", "Lindqvist", "Moreau", "Tanaka", "Varga",
                "Castell", "Ibarra", "Kowalski", "Haddad", "Nakamura", "Petrov", "Quinlan",
                "Rahman", "Sato", "Thorne", "Umarov", "Valdez", "Whitcombe", "Yilmaz", "Zeller",
                "Abernathy", "Brandt", "Cerny", "Duarte", "Esposito", "Fairbanks", "Gallo"),
    months=("January", "February", "March", "April", "May", "June", "July", "August",
            "September", "October", "November", "December"),
    years=(1940, 2001),
    universities=("Daegu Global Science University in Daegu, North Gyeongsang, South Korea",
                  "Shanghai Maritime University in Shanghai, Pudong, China",
                  "Tianjin Harbor University in Tianjin, Binhai, China",
                  "Northbridge Polytechnic Institute in Northbridge, Massachusetts, USA",
                  "Lisbon Coastal Arts University in Lisbon, Estremadura, Portugal",
                  "Veridian State University in Boise, Idaho, USA",
                  "Kestrel Valley College in Kamloops, British Columbia, Canada",
                  "Aurora Technical University in Tromso, Troms, Norway",
                  "Helmsford Medical School in Brighton, East Sussex, England",
                  "Quarry Hill University in Dunedin, Otago, New Zealand",
                  "Saltmarsh Institute in Galway, Connacht, Ireland",
                  "Oakridge Engineering College in Knoxville, Tennessee, USA"),
    occupations=("Tour Guide", "Architect", "Pharmacist", "Marine Biologist", "Librarian",
                 "Civil Engineer", "Translator", "Carpenter", "Data Analyst", "Pilot",
                 "Sommelier", "Veterinarian", "Cartographer", "Locksmith"),
    # cities, birth locations and university towns are disjoint so answer spans stay unique
    cities=("Podgorica, Podgorica, Montenegro", "Tbilisi, Tbilisi, Georgia", "Valparaiso, Valparaiso, Chile",
            "Hobart, Tasmania, Australia", "Kumasi, Ashanti, Ghana", "Cusco, Cusco, Peru",
            "Bergamo, Lombardy, Italy", "Da Nang, Da Nang, Vietnam", "Leipzig, Saxony, Germany",
            "Mombasa, Mombasa, Kenya", "Halifax, Nova Scotia, Canada", "Salta, Salta, Argentina"),
    locations=("Aleppo, Aleppo Governorate, Syria", "Nantes, Pays de la Loire, France",
               "Medan, North Sumatra, Indonesia", "Arequipa, Arequipa, Peru", "Kazan, Tatarstan, Russia",
               "Tampere, Pirkanmaa, Finland", "Mysore, Karnataka, India", "Oaxaca, Oaxaca, Mexico",
               "Gdansk, Pomerania, Poland", "Izmir, Izmir, Turkey"),
    genders=(("male", "he", "his"), ("female", "she", "her")),
)


def tag_answer(answer: str, slot: str | None = None, declared: str | None = None) -> str:
    """Answer-type tag: fixed per template slot; ingested answers must declare theirs."""
    if slot is not None:
        try:
            return SLOT_TAGS[slot]
        except KeyError:
            raise ValueError(f"no answer tag for slot {slot!r}") from None
    if declared is None:
        raise ValueError(f"answer {answer!r} carries no answer_tag")
    if declared not in ANSWER_TAGS:
        raise ValueError(f"unknown answer tag {declared!r}")
    return declared


KNOWLEDGE_TEMPLATE = ("{full_name} was born on {date}. They studied in {university}. "
                      "They work as {occupation}. They live in {city}.")
# (question template, answer slot, question tag, direction)
KNOWLEDGE_QUESTIONS = (
    ("What is {full_name}'s first name?", "first_name", "Manipulated", "forward"),
    ("What is {full_name}'s last name?", "last_name", "Manipulated", "forward"),
    ("When was {full_name} born?", "date", "Standard", "forward"),
    ("Where did {full_name} study?", "university", "Standard", "forward"),
    ("What does {full_name} work as?", "occupation", "Standard", "forward"),
    ("Where does {full_name} live?", "city", "Standard", "forward"),
    ("In which year was {full_name} born?", "year", "Manipulated", "forward"),
    ("In which month was {full_name} born?", "month", "Manipulated", "forward"),
    ("Who was born on {date}?", "full_name", "Standard", "reverse"),
    ("Who studied in {university}?", "full_name", "Standard", "reverse"),
    ("Who works as {occupation}?", "full_name", "Standard", "reverse"),
    ("Who lives in {city}?", "full_name", "Standard", "reverse"),
    ("What is the first name of the person who lives in {city}?", "first_name", "Part", "reverse"),
)

COREFERENCE_TEMPLATE = ("{full_name} was born on {date} in {location}. {Pronoun} is {gender}. "
                        "{Pronoun} studied in {university}. {Pronoun} works as {occupation}. "
                        "{Pronoun} lives in {city}.")
# (question template, answer slot, question tag, direction, mentions the pronoun)
COREFERENCE_QUESTIONS = (
    ("Where was {pronoun} born?", "location", "Standard", "forward", True),
    ("When was {pronoun} born?", "date", "Standard", "forward", True),
    ("Where did {pronoun} study?", "university", "Standard", "forward", True),
    ("What does {pronoun} work as?", "occupation", "Standard", "forward", True),
    ("Where does {pronoun} live?", "city", "Standard", "forward", True),
    ("What is {possessive} first name?", "first_name", "Manipulated", "forward", True),
    ("What is {possessive} last name?", "last_name", "Manipulated", "forward", True),
    ("Who was born on {date}?", "full_name", "Standard", "reverse", False),
    ("Who works as {occupation}?", "full_name", "Standard", "reverse", False),
)


def _flip_gender(slots: dict[str, str], pool: EntityPool) -> dict[str, str]:
    others = [g for g in pool.genders if g[0] != slots["gender"]]
    if not others:
        raise ValueError("pronoun swaps need at least two genders in the pool")
    gender, pronoun, possessive = others[0]
    return {**slots, "gender": gender, "pronoun": pronoun, "possessive": possessive}


def gen_knowledge_manipulation(n: int, seed: int = 0, pool: EntityPool = DEFAULT_POOL) -> list[SynthExample]:
    if n <= 0:
        raise ValueError("n must be positive")
    out = []
    for idx in range(n):
        slots = pool.sample(np.random.default_rng([seed, 0x4B4D, idx]))
        passage = KNOWLEDGE_TEMPLATE.format(**slots)
        pairs = [QAPair(q.format(**slots), slots[slot], tag_answer(slots[slot], slot=slot), qtag, direction)
                 for q, slot, qtag, direction in KNOWLEDGE_QUESTIONS]
        out.append(SynthExample(f"knowledge-{seed}-{idx}", "knowledge", passage, _ground(passage, pairs)))
    return out


def gen_coreference(n: int, swap_fraction: float = 1 / 3, seed: int = 0,
                    pool: EntityPool = DEFAULT_POOL) -> list[SynthExample]:
    """Pronoun-template passages; a seeded fraction of pronoun questions is gender-flipped."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= swap_fraction <= 1.0:
        raise ValueError("swap_fraction must lie in [0, 1]")
    out = []
    for idx in range(n):
        rng = np.random.default_rng([seed, 0x434F, idx])
        slots = pool.sample(rng)
        passage = COREFERENCE_TEMPLATE.format(Pronoun=slots["pronoun"].capitalize(), **slots)
        flipped = _flip_gender(slots, pool)
        pairs = []
        for q, slot, qtag, direction, has_pronoun in COREFERENCE_QUESTIONS:
            swapped = has_pronoun and rng.random() < swap_fraction
            question = q.format(**(flipped if swapped else slots))
            gold = UNKNOWN_GOLD if swapped else slots[slot]
            pairs.append(QAPair(question, gold, tag_answer(gold, slot=slot), qtag, direction))
        out.append(SynthExample(f"coreference-{seed}-{idx}", "coreference", passage, _ground(passage, pairs)))
    return out


def _validate_line(doc, lineno: int) -> tuple[SynthExample | None, list[tuple[int, str]]]:
    problems: list[tuple[int, str]] = []
    if not isinstance(doc, dict):
        return None, [(lineno, "line is not a JSON object")]
    task, passage, qa = doc.get("task"), doc.get("passage"), doc.get("qa")
    if task not in TASKS:
        problems.append((lineno, f"unknown task {task!r}"))
    if not isinstance(passage, str) or not passage.strip():
        problems.append((lineno, "passage must be a non-empty string"))
    if not isinstance(qa, list) or not qa:
        problems.append((lineno, "qa must be a non-empty list"))
    if problems:
        return None, problems
    pairs = []
    for k, item in enumerate(qa):
        where = f"qa[{k}]"
        if not isinstance(item, dict):
            problems.append((lineno, f"{where} is not an object"))
            continue
        missing = [f for f in ("question", "gold", "answer_tag", "question_tag", "direction") if f not in item]
        if missing:
            problems.append((lineno, f"{where} missing {', '.join(missing)}"))
            continue
        hop = item.get("hop_index")
        if task == "hops":
            if not isinstance(hop, int) or isinstance(hop, bool) or not 0 <= hop <= MAX_HOP:
                problems.append((lineno, f"{where} hops questions need hop_index in 0..{MAX_HOP}"))
                continue
        elif hop is not None:
            problems.append((lineno, f"{where} hop_index is only valid for the hops task"))
            continue
        try:
            tag = tag_answer(item["gold"], declared=item["answer_tag"])
            pair = QAPair(item["question"], item["gold"], tag, item["question_tag"], item["direction"], hop)
            if not pair.unknown:
                pair = replace(pair, t_ans=align_answer_span(passage, pair.gold))
        except ValueError as exc:
            problems.append((lineno, f"{where}: {exc}"))
            continue
        pairs.append(pair)
    if problems:
        return None, problems
    ex_id = str(doc.get("id", f"{task}-line{lineno}"))
    return SynthExample(ex_id, task, passage, tuple(pairs)), []


def ingest_dataset(path: str | Path) -> list[SynthExample]:
    """Load externally authored examples from JSONL, validating every line."""
    examples, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append((lineno, f"invalid JSON: {exc.msg}"))
                continue
            example, errs = _validate_line(doc, lineno)
            problems.extend(errs)
            if example is not None:
                examples.append(example)
    if problems:
        raise DatasetValidationError(problems)
    return examples


def write_dataset(examples: Iterable[SynthExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


INSTRUCTION = "Read the following text and answer briefly based on it. Return only the answer. Do not generate extra."


def render_prompt(example: SynthExample, regime: str = "agnostic") -> str:
    """Prompt text; the aware form lists the candidate questions ahead of the passage."""
    if regime == "agnostic":
        return f"{INSTRUCTION}\n\n{example.passage}\n"
    if regime == "aware":
        questions = "\n".join(qa.question for qa in example.qa_pairs)
        return (f"{INSTRUCTION}\n\nYou will be given one of the following questions:\n\n"
                f"{questions}\n\n{example.passage}\n")
    raise ValueError(f"unknown regime {regime!r}")


def dataset_stats(examples: Sequence[SynthExample]) -> list[dict]:
    """One summary row per task: passage length, queries per passage and totals."""
    if not examples:
        raise ValueError("no examples")
    by_task: dict[str, list[SynthExample]] = {}
    for ex in examples:
        by_task.setdefault(ex.task, []).append(ex)
    rows = []
    for task in sorted(by_task, key=TASKS.index):
        exs = by_task[task]
        words = [ex.word_count for ex in exs]
        queries = [len(ex.qa_pairs) for ex in exs]
        rows.append({
            "task": task,
            "passage_words_mean": statistics.fmean(words),
            "passage_words_sd": statistics.pstdev(words),
            "queries_per_passage": statistics.fmean(queries),
            "total_passages": len(exs),
            "total_queries": sum(queries),
            "llm_generated": task in LLM_GENERATED,
        })
    return rows
