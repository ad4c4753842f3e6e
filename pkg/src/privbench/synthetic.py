"""Context-free generator for small NLI-style corpora.

Labels follow the MNLI convention: 0 entailment, 1 neutral, 2 contradiction.
The hypothesis restates the premise subject and verb (entailment), negates the
verb (contradiction), or talks about a subject absent from the premise
(neutral). Sentences carry enough lexical randomness that individual samples
are distinguishable, which membership inference needs.
"""

from __future__ import annotations

import numpy as np

from privbench.corpus import RawSample

ADJECTIVES = (
    "red blue green old young tall small quiet loud happy sleepy brave clever gentle angry "
    "lazy busy shy proud calm bright dark tiny huge swift slow warm cold wild polite"
).split()
NOUNS = (
    "cat dog bird farmer teacher child doctor pilot baker sailor horse fox student singer "
    "painter driver king queen monkey rabbit lawyer nurse artist writer soldier chef mouse "
    "lion tiger wolf bear owl goat sheep girl boy woman man clerk guard"
).split()
VERBS = [
    ("sleeps", "sleep"), ("runs", "run"), ("sings", "sing"), ("waits", "wait"),
    ("dances", "dance"), ("reads", "read"), ("works", "work"), ("rests", "rest"),
    ("plays", "play"), ("walks", "walk"), ("swims", "swim"), ("cooks", "cook"),
    ("laughs", "laugh"), ("paints", "paint"), ("jumps", "jump"), ("writes", "write"),
    ("talks", "talk"), ("studies", "study"), ("travels", "travel"), ("hides", "hide"),
]
PREPOSITIONS = "near behind inside beside under above".split()
PLACES = (
    "house river garden station market library school bridge forest castle tower harbor "
    "church museum farm park beach hotel village office kitchen barn cave field lake hill "
    "road shop temple palace"
).split()
ADVERBS = "quietly happily slowly quickly often rarely early late alone together".split()

NUM_LABELS = 3


class NliGenerator:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def _pick(self, items, exclude=()):
        while True:
            x = items[int(self.rng.integers(len(items)))]
            if x not in exclude:
                return x

    def sample(self, sid: str) -> RawSample:
        noun = self._pick(NOUNS)
        verb3, verb = VERBS[int(self.rng.integers(len(VERBS)))]
        place = self._pick(PLACES)
        premise = (f"the {self._pick(ADJECTIVES)} {noun} {verb3} {self._pick(ADVERBS)} "
                   f"{self._pick(PREPOSITIONS)} the {self._pick(ADJECTIVES)} {place}")
        nouns = {noun}
        if self.rng.random() < 0.5:
            noun2 = self._pick(NOUNS, nouns)
            nouns.add(noun2)
            premise += f" while the {noun2} {self._pick(VERBS)[0]}"
        label = int(self.rng.integers(NUM_LABELS))
        if label == 0:
            hyp = f"the {noun} {verb3}" if self.rng.random() < 0.5 else f"a {noun} {verb3} {self._pick(PREPOSITIONS)} the {place}"
        elif label == 2:
            hyp = f"the {noun} does not {verb}" if self.rng.random() < 0.5 else f"the {noun} never {verb3}"
        else:
            hyp = f"the {self._pick(NOUNS, nouns)} {self._pick(VERBS)[0]}"
        return RawSample(sid, premise, hyp, label)

    def generate(self, n: int, prefix: str = "s") -> list[RawSample]:
        return [self.sample(f"{prefix}{i:06d}") for i in range(n)]


def lexicon() -> list[str]:
    words = set(ADJECTIVES) | set(NOUNS) | set(PREPOSITIONS) | set(PLACES) | set(ADVERBS)
    for a, b in VERBS:
        words |= {a, b}
    return sorted(words)
