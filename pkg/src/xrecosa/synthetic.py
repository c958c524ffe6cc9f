"""Synthetic corpora for smoke tests and toy experiments.

``echo_dialogues`` builds the copy task used to compare decoder modes: one
context utterance carries a rare marker word and the reply must repeat it.
``daily_dialogues`` writes small templated everyday conversations in the
``__eou__`` corpus format.
"""

from __future__ import annotations

from importlib import resources
from typing import List, Tuple

import numpy as np

from .corpus import Dialogue, parse_dialogues

FILLER = (
    "the a we you they it is was will can have had go went see saw like want need "
    "today tomorrow now later here there home work school park store food tea rain "
    "sun car bus train friend family plan idea time day night week good nice busy"
).split()

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh")
_NUCLEI = ("a", "e", "i", "o", "u")


def marker_words(n: int) -> List[str]:
    """``n`` distinct made-up two-syllable words that never collide with :data:`FILLER`."""
    words = []
    for o1 in _ONSETS:
        for v1 in _NUCLEI:
            for o2 in _ONSETS:
                w = f"{o1}{v1}{o2}ox"
                if w not in FILLER:
                    words.append(w)
                if len(words) == n:
                    return words
    raise ValueError(f"cannot make {n} marker words")


def echo_dialogues(n: int, seed: int = 0, n_markers: int = 60, turns: int = 3,
                   min_words: int = 4, max_words: int = 7) -> List[Dialogue]:
    """Dialogues whose last utterance is ``so <marker> it is .``.

    Exactly one of the ``turns`` context utterances contains the marker, at a random
    turn and word position; everything else is filler.
    """
    rng = np.random.default_rng(seed)
    markers = marker_words(n_markers)
    out = []
    for _ in range(n):
        marker = markers[rng.integers(n_markers)]
        where = rng.integers(turns)
        utts = []
        for t in range(turns):
            words = list(rng.choice(FILLER, size=rng.integers(min_words, max_words + 1)))
            if t == where:
                words.insert(int(rng.integers(len(words) + 1)), marker)
            utts.append(" ".join(words) + " .")
        utts.append(f"so {marker} it is .")
        out.append(Dialogue(utts))
    return out


def smoke_dialogues() -> List[Dialogue]:
    """The bundled 16-dialogue overfitting corpus."""
    text = resources.files("xrecosa").joinpath("data/smoke_dialogues.txt").read_text(encoding="utf-8")
    dialogues, _ = parse_dialogues(text.splitlines())
    return dialogues


_TOPICS = {
    "restaurant": [
        ("can i take your order , {name} ?", "yes , i'd like the {food} , please .", "anything to drink ?",
         "just a glass of {drink} .", "it will be ready in {num} minutes ."),
        ("this {food} is delicious .", "i'm glad you like it .", "can we get the bill ?",
         "sure , it's {num} dollars in total .", "here you are . keep the change ."),
    ],
    "shopping": [
        ("how much is this {item} ?", "it's {num} dollars .", "that's too expensive for me .",
         "we have a cheaper one in {color} .", "great , i'll take the {color} one ."),
        ("excuse me , do you sell {item} here ?", "yes , they are on the second floor .",
         "do you have one in {color} ?", "let me check for you .", "thank you very much ."),
    ],
    "doctor": [
        ("what's the matter with you , {name} ?", "i have a terrible {ache} .", "how long have you felt like this ?",
         "about {num} days .", "take this medicine and rest at home ."),
        ("good morning , doctor .", "good morning . how can i help you ?", "my {ache} is getting worse .",
         "let me have a look .", "you should drink more water ."),
    ],
    "travel": [
        ("when does the train to {city} leave ?", "at {num} o'clock .", "how long is the trip ?",
         "about three hours .", "i'll buy a ticket now ."),
        ("have you ever been to {city} , {name} ?", "yes , i went there last summer .",
         "what did you like most ?", "the {food} was amazing .", "i really want to go there ."),
    ],
    "weather": [
        ("what's the weather like today ?", "it's {weather} outside .", "should i take an umbrella ?",
         "yes , it might rain later .", "thanks for telling me ."),
        ("it's so {weather} today .", "yes , let's stay inside .", "we could watch a movie .",
         "good idea , i'll make some {drink} .", "perfect ."),
    ],
    "work": [
        ("are you busy right now , {name} ?", "a little . what do you need ?", "can you check this report ?",
         "sure , give me {num} minutes .", "thanks , it's due this afternoon ."),
        ("how was your meeting ?", "it went well , but it was long .", "did they like your plan ?",
         "yes , we start next week .", "congratulations !"),
    ],
}

_SLOTS = {
    "name": ["tom", "mary", "jack", "lily", "sam", "anna"],
    "food": ["pizza", "soup", "steak", "salad", "noodles", "fish"],
    "drink": ["tea", "coffee", "juice", "water", "milk"],
    "item": ["jacket", "lamp", "bag", "watch", "dress", "camera"],
    "color": ["red", "blue", "black", "white", "green"],
    "ache": ["headache", "stomachache", "toothache", "backache"],
    "city": ["boston", "paris", "london", "tokyo", "beijing"],
    "weather": ["sunny", "cold", "windy", "cloudy", "hot"],
    "num": ["two", "three", "five", "ten", "twenty", "thirty"],
}


def _fill(template: str, rng: np.random.Generator) -> str:
    out = template
    for slot, values in _SLOTS.items():
        key = "{" + slot + "}"
        while key in out:
            out = out.replace(key, values[rng.integers(len(values))], 1)
    return out


def daily_dialogues(n: int, seed: int = 0) -> List[Dialogue]:
    """Templated everyday dialogues of 3-5 turns across six topics."""
    rng = np.random.default_rng(seed)
    topics = sorted(_TOPICS)
    out = []
    for _ in range(n):
        scripts = _TOPICS[topics[rng.integers(len(topics))]]
        script = scripts[rng.integers(len(scripts))]
        k = int(rng.integers(3, len(script) + 1))
        out.append(Dialogue([_fill(t, rng) for t in script[:k]]))
    return out


def alternative_references(d: Dialogue, seed: int = 0, n: int = 2) -> List[str]:
    """Extra references for a dialogue's last turn: slot-refilled variants of its template."""
    rng = np.random.default_rng(seed)
    last = d.utterances[-1]
    for scripts in _TOPICS.values():
        for script in scripts:
            for t in script:
                head = t.split("{")[0]
                if "{" in t and head and last.startswith(head):
                    return [_fill(t, rng) for _ in range(n)]
    return []


def split(dialogues: List[Dialogue], n_dev: int, n_test: int) -> Tuple[List[Dialogue], List[Dialogue], List[Dialogue]]:
    n_train = len(dialogues) - n_dev - n_test
    return dialogues[:n_train], dialogues[n_train:n_train + n_dev], dialogues[n_train + n_dev:]
