"""Deterministic stand-in corpora for desk-scale runs.

The benchmark corpora this package targets are distributed by third
parties and are not bundled.  These generators produce seeded corpora
with the same shape so training, evaluation, and the analysis harnesses
run end to end out of the box:

  * ``question_corpus``: six question types (abbreviation, description,
    entity, human, location, numeric) with shared scaffolding such as
    "what is the _ of _", so classes are separated by word identity and
    composition rather than by a single give-away token;
  * ``polarity_corpus``: short opinion phrases in two classes, where a
    quarter of the examples flip polarity through negators ("never
    pleasant") and must be resolved compositionally;
  * ``toy_corpus``: eight trivially separable examples for smoke tests.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

QUESTION_SPLITS = {"train": 4843, "val": 539, "test": 500}
POLARITY_SPLITS = {"train": 8587, "val": 955, "test": 1067}

QUESTION_CLASSES = ("abbreviation", "description", "entity", "human", "location", "numeric")

_ANIMALS = ["walrus", "crickets", "falcons", "otters", "beetles", "pandas", "herons",
            "iguanas", "salmon", "badgers", "wolves", "magpies", "toads", "lynxes"]
_DEVICES = ["telescope", "compass", "turbine", "printing press", "barometer", "radio",
            "microscope", "battery", "helicopter", "thermometer", "camera", "reactor"]
_NOUNS = ["photosynthesis", "gravity", "inflation", "erosion", "magnetism", "evaporation",
          "metabolism", "friction", "lightning", "combustion", "pollination", "osmosis"]
_OBJECTS = ["violin", "bridge", "sailboat", "cathedral", "lighthouse", "windmill",
            "fountain", "tapestry", "chandelier", "obelisk", "aqueduct", "locomotive"]
_COLORED = ["emeralds", "flamingos", "autumn leaves", "glaciers", "corals", "amethyst",
            "saffron", "mahogany", "turquoise", "obsidian"]
_FOODS = ["gouda", "baklava", "gazpacho", "pretzels", "kimchi", "focaccia", "paella",
          "goulash", "tiramisu", "ceviche", "chutney", "dumplings"]
_COUNTRIES = ["norway", "brazil", "kenya", "portugal", "vietnam", "iceland", "morocco",
              "uruguay", "finland", "nepal", "tunisia", "latvia", "peru", "jordan"]
_CITIES = ["oslo", "lisbon", "nairobi", "hanoi", "marrakesh", "montevideo", "helsinki",
           "kathmandu", "tunis", "riga", "lima", "amman", "porto", "bergen"]
_LANDMARKS = ["grand bazaar", "old harbor", "stone arch", "salt cathedral", "cliff temple",
              "twin aqueduct", "sunken forum", "amber castle", "marble gate"]
_FIRST_NAMES = ["amelia", "bjorn", "carmen", "dmitri", "elena", "farid", "greta", "hassan",
                "ingrid", "jorge", "katya", "liam", "marta", "nadia", "omar", "priya",
                "quentin", "rosa", "stefan", "tariq"]
_LAST_NAMES = ["almeida", "bergström", "castillo", "dupont", "eriksen", "fontaine",
               "garza", "holloway", "ibrahim", "jansen", "kowalski", "lindqvist",
               "moreau", "novak", "okafor", "petrov", "quiroga", "rahman", "sørensen",
               "takahashi"]
_ROLES = ["chancellor", "navigator", "composer", "architect", "ambassador", "curator",
          "botanist", "cartographer", "magistrate", "astronomer", "engineer", "poet"]
_EVENTS = ["glass festival", "harvest regatta", "winter congress", "copper summit",
           "lantern parade", "spring armistice", "coral expedition", "granite treaty"]
_ITEMS = ["strings", "chambers", "spokes", "vertices", "petals", "islets", "locks",
          "arches", "paddles", "turrets"]
_CONTAINERS = ["harpsichord", "honeycomb", "carousel", "archipelago", "monastery",
               "observatory", "citadel", "amphitheater"]
_TASKS = ["glassblowing class", "border crossing", "lighthouse shift", "cider pressing",
          "mural restoration", "census count"]
_ADJS = ["tallest", "oldest", "fastest", "smallest", "brightest", "rarest", "loudest",
         "deepest"]
_VERBS = ["migrate", "hibernate", "molt", "burrow", "swarm", "graze"]

_POS_WORDS = ["delightful", "refreshing", "gripping", "superb", "heartfelt", "charming",
              "luminous", "graceful", "witty", "stirring", "elegant", "vivid", "tender",
              "masterful", "joyous", "radiant", "crisp", "soulful", "inventive",
              "captivating", "warm", "generous", "sincere", "uplifting", "polished",
              "sparkling", "sublime", "rousing", "dazzling", "satisfying"]
_NEG_WORDS = ["dreadful", "tedious", "lame", "hollow", "grating", "dismal", "clumsy",
              "stale", "shrill", "bleak", "wooden", "sloppy", "dreary", "lifeless",
              "pointless", "grim", "irritating", "bland", "crude", "muddled", "tiresome",
              "soggy", "abrasive", "joyless", "forgettable", "disappointing", "sour",
              "plodding", "feeble", "vapid"]
_OPINION_NOUNS = ["plot", "pacing", "dialogue", "ending", "premise", "score", "acting",
                  "script", "editing", "staging", "lighting", "casting"]
_INTENSIFIERS = ["very", "truly", "quite", "thoroughly", "remarkably", "rather"]
_NEGATORS = ["not", "never", "hardly", "scarcely"]
_FLIP_PREFIXES = ["failed to be", "a total lack of anything", "nowhere near"]


def _choice(rng: np.random.Generator, pool):
    return pool[int(rng.integers(len(pool)))]


def _person(rng):
    return f"{_choice(rng, _FIRST_NAMES)} {_choice(rng, _LAST_NAMES)}"


def _abbr(rng):
    letters = "abcdefghijklmnopqrstuvwxyz"
    length = int(rng.integers(2, 5))
    return "".join(_choice(rng, letters) for _ in range(length)) + "."


# One callable per class; shared scaffolds like "what is the _ of _" keep
# the classes from being separable on the leading tokens alone.
_QUESTION_TEMPLATES = {
    0: [
        lambda r: f"what does {_abbr(r)} stand for",
        lambda r: f"what is the abbreviation for {_choice(r, _NOUNS)}",
        lambda r: f"what does the acronym {_abbr(r)} mean",
        lambda r: f"what is the short form of {_choice(r, _DEVICES)}",
        lambda r: f"what is the expansion of {_abbr(r)}",
    ],
    1: [
        lambda r: f"what is {_choice(r, _NOUNS)}",
        lambda r: f"how does a {_choice(r, _DEVICES)} work",
        lambda r: f"why do {_choice(r, _ANIMALS)} {_choice(r, _VERBS)}",
        lambda r: f"what causes {_choice(r, _NOUNS)}",
        lambda r: f"what is the difference between {_choice(r, _NOUNS)} and {_choice(r, _NOUNS)}",
        lambda r: f"what is the purpose of a {_choice(r, _DEVICES)}",
        lambda r: f"what is the history of the {_choice(r, _LANDMARKS)}",
    ],
    2: [
        lambda r: f"what is the color of {_choice(r, _COLORED)}",
        lambda r: f"what do {_choice(r, _ANIMALS)} eat",
        lambda r: f"what is the name of the {_choice(r, _ADJS)} {_choice(r, _OBJECTS)}",
        lambda r: f"which {_choice(r, _FOODS)} comes from {_choice(r, _COUNTRIES)}",
        lambda r: f"what are the types of {_choice(r, _ANIMALS)}",
        lambda r: f"what do you call a young {_choice(r, _ANIMALS)}",
        lambda r: f"what is the mascot of the {_choice(r, _EVENTS)}",
    ],
    3: [
        lambda r: f"who is {_person(r)}",
        lambda r: f"who invented the {_choice(r, _DEVICES)}",
        lambda r: f"what is {_person(r)}'s nickname",
        lambda r: f"who was the first {_choice(r, _ROLES)} of {_choice(r, _COUNTRIES)}",
        lambda r: f"which {_choice(r, _ROLES)} designed the {_choice(r, _OBJECTS)}",
        lambda r: f"who is the {_choice(r, _ADJS)} {_choice(r, _ROLES)} in {_choice(r, _COUNTRIES)}",
        lambda r: f"what is the name of the {_choice(r, _ROLES)} of the {_choice(r, _EVENTS)}",
    ],
    4: [
        lambda r: f"where is the {_choice(r, _LANDMARKS)}",
        lambda r: f"what is the capital of {_choice(r, _COUNTRIES)}",
        lambda r: f"what country is {_choice(r, _CITIES)} in",
        lambda r: f"where can you find {_choice(r, _ANIMALS)}",
        lambda r: f"which city hosts the {_choice(r, _EVENTS)}",
        lambda r: f"where do {_choice(r, _ANIMALS)} {_choice(r, _VERBS)}",
        lambda r: f"what is the location of the {_choice(r, _EVENTS)}",
    ],
    5: [
        lambda r: f"how many {_choice(r, _ITEMS)} are in a {_choice(r, _CONTAINERS)}",
        lambda r: f"when did the {_choice(r, _EVENTS)} happen",
        lambda r: f"what is the population of {_choice(r, _CITIES)}",
        lambda r: f"how far is {_choice(r, _CITIES)} from {_choice(r, _CITIES)}",
        lambda r: f"how long does a {_choice(r, _TASKS)} take",
        lambda r: f"how many {_choice(r, _ITEMS)} does the {_choice(r, _OBJECTS)} have",
        lambda r: f"what is the height of the {_choice(r, _LANDMARKS)}",
    ],
}


def question_corpus(seed: int = 0,
                    sizes: dict[str, int] = QUESTION_SPLITS) -> dict[str, list[tuple[int, str]]]:
    """Six-way question-type corpus with TREC-like split sizes."""
    rng = np.random.default_rng(seed)
    splits: dict[str, list[tuple[int, str]]] = {}
    for split, count in sizes.items():
        rows = []
        for _ in range(count):
            label = int(rng.integers(6))
            template = _choice(rng, _QUESTION_TEMPLATES[label])
            rows.append((label, template(rng)))
        splits[split] = rows
    return splits


def _polarity_phrase(rng: np.random.Generator) -> tuple[int, str]:
    positive = bool(rng.integers(2))
    word = _choice(rng, _POS_WORDS if positive else _NEG_WORDS)
    style = rng.random()
    if style < 0.25:
        # negation flips the lexical polarity
        negator = _choice(rng, _NEGATORS)
        text = f"{negator} {word}"
        if rng.random() < 0.3:
            text = f"{text} at all"
        return (0 if positive else 1), text
    if style < 0.33 and positive:
        # "failed to be charming" reads negative
        return 0, f"{_choice(rng, _FLIP_PREFIXES)} {word}"
    if style < 0.55:
        return (1 if positive else 0), f"{_choice(rng, _INTENSIFIERS)} {word}"
    if style < 0.8:
        return (1 if positive else 0), f"{word} {_choice(rng, _OPINION_NOUNS)}"
    if style < 0.9:
        other = _choice(rng, _OPINION_NOUNS)
        return (1 if positive else 0), f"the {other} is {word}"
    return (1 if positive else 0), word


def polarity_corpus(seed: int = 1,
                    sizes: dict[str, int] = POLARITY_SPLITS) -> dict[str, list[tuple[int, str]]]:
    """Binary opinion-phrase corpus with MPQA-like split sizes (1 = positive)."""
    rng = np.random.default_rng(seed)
    return {
        split: [_polarity_phrase(rng) for _ in range(count)]
        for split, count in sizes.items()
    }


def toy_corpus() -> dict[str, list[tuple[int, str]]]:
    """Eight separable examples over two disjoint vocabularies."""
    class0 = ["alpha beta gamma", "beta gamma delta", "gamma alpha beta", "delta beta alpha"]
    class1 = ["omega sigma tau", "sigma tau rho", "tau omega sigma", "rho sigma omega"]
    rows = [(0, t) for t in class0] + [(1, t) for t in class1]
    return {"train": rows, "val": rows, "test": rows}


def rewrite_pairs(examples: list[tuple[int, str]], seed: int = 2, per_class: int = 50,
                  classes: tuple[int, ...] = (2, 3)) -> list[tuple[int, str, str]]:
    """Word-order variants of sampled sentences, labels preserved.

    Returns (label, original, variant) rows; variants prepend fillers,
    rotate trailing phrases to the front, or shuffle outright.
    """
    rng = np.random.default_rng(seed)
    fillers = ["can you tell me", "i want to ask you", "please tell me"]
    rows: list[tuple[int, str, str]] = []
    for wanted in classes:
        pool = [(lab, text) for lab, text in examples if lab == wanted]
        picked = rng.choice(len(pool), size=min(per_class, len(pool)), replace=False)
        for idx in picked:
            label, original = pool[int(idx)]
            tokens = original.split()
            style = rng.random()
            if style < 0.4:
                variant = f"{_choice(rng, fillers)} {original}"
            elif style < 0.75 and len(tokens) > 3:
                cut = int(rng.integers(1, len(tokens) - 1))
                variant = " ".join(tokens[cut:] + tokens[:cut])
            else:
                order = rng.permutation(len(tokens))
                variant = " ".join(tokens[i] for i in order)
            rows.append((label, original, variant))
    return rows


def write_corpus(directory, splits: dict[str, list[tuple[int, str]]]) -> Path:
    """Write split TSVs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, rows in splits.items():
        lines = "".join(f"{label}\t{text}\n" for label, text in rows)
        (directory / f"{split}.tsv").write_text(lines, encoding="utf-8")
    manifest = directory / "manifest.cfg"
    manifest.write_text(
        "".join(f"{split} = {split}.tsv\n" for split in splits), encoding="utf-8"
    )
    return manifest


def write_rewrites(path, rows: list[tuple[int, str, str]]) -> Path:
    path = Path(path)
    path.write_text(
        "".join(f"{orig}\t{var}\n" for _, orig, var in rows), encoding="utf-8"
    )
    return path


def build_default_datasets(root) -> dict[str, Path]:
    """Materialize the stand-in corpora under ``root``; returns manifests."""
    root = Path(root)
    questions = question_corpus()
    manifests = {
        "trec_synth": write_corpus(root / "trec_synth", questions),
        "mpqa_synth": write_corpus(root / "mpqa_synth", polarity_corpus()),
        "toy": write_corpus(root / "toy", toy_corpus()),
    }
    write_rewrites(root / "trec_synth" / "rewrites.tsv",
                   rewrite_pairs(questions["test"]))
    return manifests
