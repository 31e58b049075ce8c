"""Synthetic fact world, word-level tokenizer, and edit-request handling.

The world is a closed vocabulary of subjects, first-hop objects ("cities"),
and second-hop objects ("countries"), wired up by one-word relations:

    s07 bornin city3 land1 .        (base fact, subject -> city -> its country)
    s07 birthin city3 land1 .       (alias surface form of the same fact)
    city3 locatedin land1 .         (hop fact shared by every subject in city3)

Edit requests are counterfactual: a new city (and its country) replaces the
old one. Rephrase prompts use the alias relation word; portability probes ask
about the new object's hop; locality probes come from subjects no request
ever touches.
"""

import json
from dataclasses import dataclass, field

import numpy as np

PERIOD = "."
HOP_WORD = "locatedin"
RELATION_WORDS = [("bornin", "birthin"), ("livesin", "basedin"), ("diedin", "deathin")]


class Vocab:
    """Closed word-level tokenizer: whitespace split, exact membership."""

    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise ValueError("vocabulary contains duplicate words")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise ValueError(f"word {word!r} not in vocabulary")
            ids.append(self.index[word])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


@dataclass
class Probe:
    kind: str
    prompt: str
    answer: str
    prompt_ids: list[int] | None = None
    answer_ids: list[int] | None = None

    def bind(self, vocab: Vocab):
        self.prompt_ids = vocab.encode(self.prompt)
        self.answer_ids = vocab.encode(self.answer)


@dataclass
class EditRequest:
    """One edit: prompt -> new target, plus its evaluation probes."""

    subject: str
    prompt: str
    target_new: str
    rephrases: list[str] = field(default_factory=list)
    portability: list[Probe] = field(default_factory=list)
    locality: list[Probe] = field(default_factory=list)
    prompt_ids: list[int] | None = None
    target_ids: list[int] | None = None
    rephrase_ids_list: list[list[int]] = field(default_factory=list)

    def bind(self, vocab: Vocab, max_ctx: int):
        self.prompt_ids = vocab.encode(self.prompt)
        self.target_ids = vocab.encode(self.target_new)
        if not self.target_ids:
            raise ValueError(f"subject {self.subject!r}: target_new tokenizes to zero tokens")
        if len(self.prompt_ids) + len(self.target_ids) > max_ctx:
            raise ValueError(
                f"subject {self.subject!r}: prompt+target exceeds max_ctx {max_ctx}"
            )
        self.rephrase_ids_list = [vocab.encode(r) for r in self.rephrases]
        for probe in self.portability + self.locality:
            probe.bind(vocab)

    def rephrase_ids(self):
        return list(zip(self.rephrases, self.rephrase_ids_list))

    def to_record(self) -> dict:
        return {
            "subject": self.subject,
            "prompt": self.prompt,
            "target_new": self.target_new,
            "rephrase_prompts": list(self.rephrases),
            "portability": [
                {"kind": p.kind, "prompt": p.prompt, "answer": p.answer} for p in self.portability
            ],
            "locality": [
                {"kind": p.kind, "prompt": p.prompt, "answer": p.answer} for p in self.locality
            ],
        }


@dataclass
class FactWorld:
    seed: int
    subjects: list[str]
    relations: list[tuple[str, str]]  # (primary word, alias word)
    objects: list[str]
    secondary: list[str]
    hop: dict[str, str]  # object -> secondary object
    base_facts: dict[tuple[str, str], str]  # (subject, relation word) -> object
    vocab: Vocab
    edit_subjects: list[str]
    locality_pool: list[Probe] = field(default_factory=list)

    def fact_prompt_pairs(self) -> list[tuple[list[int], list[int]]]:
        """(prompt ids, answer ids) for every base fact under its primary relation word."""
        pairs = []
        for (subject, rel), obj in self.base_facts.items():
            prompt = self.vocab.encode(f"{subject} {rel}")
            answer = self.vocab.encode(f"{obj} {self.hop[obj]}")
            pairs.append((prompt, answer))
        return pairs

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "subjects": self.subjects,
            "relations": [list(r) for r in self.relations],
            "objects": self.objects,
            "secondary": self.secondary,
            "hop": self.hop,
            "base_facts": [[s, r, o] for (s, r), o in self.base_facts.items()],
            "edit_subjects": self.edit_subjects,
            "vocab": self.vocab.words,
        }


def build_vocab(subjects, relations, objects, secondary) -> Vocab:
    words = list(subjects) + list(objects) + list(secondary)
    for primary, alias in relations:
        words.extend([primary, alias])
    words.extend([HOP_WORD, PERIOD])
    return Vocab(words)


def gen_fact_world(
    seed: int,
    n_subjects: int = 40,
    n_relations: int = 2,
    n_objects: int = 8,
    n_secondary: int = 4,
    edit_fraction: float = 0.5,
) -> tuple[FactWorld, list[str], list[EditRequest]]:
    """Deterministic world + templated training corpus + counterfactual requests.

    Half the subjects (rounded down) become edit candidates with one request
    each on the first relation; locality probes are drawn only from the
    remaining subjects, so no probe ever shares a subject with a request.
    """
    if not 1 <= n_relations <= len(RELATION_WORDS):
        raise ValueError(f"n_relations must be in [1, {len(RELATION_WORDS)}]")
    if n_objects < 2 or n_secondary < 2:
        raise ValueError("need at least two objects and two secondary objects")
    rng = np.random.default_rng(seed)

    subjects = [f"s{i:02d}" for i in range(n_subjects)]
    relations = RELATION_WORDS[:n_relations]
    objects = [f"city{i}" for i in range(n_objects)]
    secondary = [f"land{i}" for i in range(n_secondary)]
    vocab = build_vocab(subjects, relations, objects, secondary)

    # acyclic hop map: every city sits in exactly one country
    hop = {obj: secondary[i % n_secondary] for i, obj in enumerate(objects)}

    base_facts: dict[tuple[str, str], str] = {}
    for subject in subjects:
        for primary, _alias in relations:
            base_facts[(subject, primary)] = objects[int(rng.integers(n_objects))]

    corpus: list[str] = []
    for (subject, rel), obj in base_facts.items():
        alias = next(a for p, a in relations if p == rel)
        tail = f"{obj} {hop[obj]} {PERIOD}"
        corpus.append(f"{subject} {rel} {tail}")
        corpus.append(f"{subject} {alias} {tail}")
    for obj in objects:
        corpus.append(f"{obj} {HOP_WORD} {hop[obj]} {PERIOD}")

    n_edit = int(n_subjects * edit_fraction)
    order = list(rng.permutation(n_subjects))
    edit_subjects = [subjects[i] for i in order[:n_edit]]
    held_out = [subjects[i] for i in order[n_edit:]]

    locality_pool = [
        Probe(
            kind="held_out_fact",
            prompt=f"{subject} {rel}",
            answer=f"{base_facts[(subject, rel)]} {hop[base_facts[(subject, rel)]]}",
        )
        for subject in held_out
        for rel, _ in relations
    ]

    primary_rel, alias_rel = relations[0]
    requests: list[EditRequest] = []
    for i, subject in enumerate(edit_subjects):
        old_obj = base_facts[(subject, primary_rel)]
        candidates = [o for o in objects if o != old_obj]
        new_obj = candidates[int(rng.integers(len(candidates)))]
        new_sec = hop[new_obj]
        probes = [
            Probe(kind="one_hop", prompt=f"{new_obj} {HOP_WORD}", answer=new_sec),
            Probe(
                kind="one_hop_subject",
                prompt=f"{subject} {primary_rel} {new_obj}",
                answer=new_sec,
            ),
        ]
        # spread the shared held-out pool across requests, three probes each
        local = [locality_pool[(3 * i + j) % len(locality_pool)] for j in range(3)] if locality_pool else []
        requests.append(
            EditRequest(
                subject=subject,
                prompt=f"{subject} {primary_rel}",
                target_new=f"{new_obj} {new_sec}",
                rephrases=[f"{subject} {alias_rel}"],
                portability=probes,
                locality=local,
            )
        )

    world = FactWorld(
        seed=seed,
        subjects=subjects,
        relations=relations,
        objects=objects,
        secondary=secondary,
        hop=hop,
        base_facts=base_facts,
        vocab=vocab,
        edit_subjects=edit_subjects,
        locality_pool=locality_pool,
    )
    for request in requests:
        request.bind(vocab, max_ctx=10**9)  # length checked again against the model config
    for probe in locality_pool:
        probe.bind(vocab)
    return world, corpus, requests


# -----------------------------------------------------------------------------
# Dataset files
# -----------------------------------------------------------------------------


def _parse_probes(raw, record_index: int, default_kind: str) -> list[Probe]:
    """Accept a list of {prompt, answer|ground_truth} or a mapping kind -> that."""
    probes: list[Probe] = []
    if raw is None:
        return probes
    if isinstance(raw, dict):
        for kind, entry in raw.items():
            if isinstance(entry, dict):
                prompts = entry.get("prompt", [])
                answers = entry.get("ground_truth", entry.get("answer", []))
                if isinstance(prompts, str):
                    prompts, answers = [prompts], [answers]
                for p, a in zip(prompts, answers):
                    probes.append(Probe(kind=str(kind), prompt=p, answer=a))
            elif isinstance(entry, list):
                for item in entry:
                    probes.append(
                        Probe(
                            kind=str(kind),
                            prompt=item["prompt"],
                            answer=item.get("answer", item.get("ground_truth")),
                        )
                    )
        return probes
    if isinstance(raw, list):
        for item in raw:
            answer = item.get("answer", item.get("ground_truth"))
            if answer is None or "prompt" not in item:
                raise ValueError(
                    f"record {record_index}: probe entries need 'prompt' and 'answer'"
                )
            probes.append(Probe(kind=item.get("kind", default_kind), prompt=item["prompt"], answer=answer))
        return probes
    raise ValueError(f"record {record_index}: unsupported probe container {type(raw).__name__}")


def load_dataset(path) -> list[EditRequest]:
    """Read a JSON array of edit records; unknown fields are ignored.

    Required per record: subject, prompt, target_new. Optional: rephrase
    (string or list, also accepted as 'rephrase_prompts'), portability{...},
    locality{...}. Malformed records raise with their index.
    """
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise ValueError("dataset must be a JSON array of records")
    requests = []
    for i, record in enumerate(data):
        for fieldname in ("subject", "prompt", "target_new"):
            if fieldname not in record:
                raise ValueError(f"record {i}: missing required field '{fieldname}'")
        rephrase = record.get("rephrase_prompts", record.get("rephrase", []))
        if isinstance(rephrase, str):
            rephrase = [rephrase]
        requests.append(
            EditRequest(
                subject=record["subject"],
                prompt=record["prompt"],
                target_new=record["target_new"],
                rephrases=list(rephrase),
                portability=_parse_probes(record.get("portability"), i, "portability"),
                locality=_parse_probes(record.get("locality"), i, "locality"),
            )
        )
    return requests


def save_dataset(requests: list[EditRequest], path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_record() for r in requests], f, indent=2, sort_keys=True)
        f.write("\n")


def bind_requests(requests: list[EditRequest], vocab: Vocab, max_ctx: int):
    for request in requests:
        request.bind(vocab, max_ctx)
    return requests


def dedup_by_subject(requests: list[EditRequest]) -> list[EditRequest]:
    """Keep the first request per (subject, prompt template); order preserved.

    Editing the same subject's same relation twice would make the first edit
    unevaluable, so later collisions are dropped.
    """
    seen = set()
    kept = []
    for request in requests:
        template = request.prompt.replace(request.subject, "{}", 1)
        key = (request.subject, template)
        if key in seen:
            continue
        seen.add(key)
        kept.append(request)
    return kept
