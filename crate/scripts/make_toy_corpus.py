#!/usr/bin/env python3
"""Generate the bundled toy corpus of short scene descriptions.

Usage: make_toy_corpus.py [N] [SEED] > crates/core/assets/toy_corpus.txt
"""
import random
import sys

PEOPLE = ["man", "woman", "boy", "girl", "child", "person", "dog", "cat", "player", "worker",
          "tourist", "student", "chef", "musician", "runner", "baby", "teenager", "couple", "group", "crowd"]
ADJ = ["young", "old", "tall", "small", "happy", "tired", "smiling", "busy", "little", "blond"]
COLORS = ["red", "blue", "green", "black", "white", "yellow", "orange", "purple", "brown", "gray"]
CLOTHES = ["shirt", "hat", "jacket", "dress", "coat", "sweater", "helmet", "scarf", "uniform", "costume"]
PLACES = ["park", "street", "beach", "kitchen", "field", "market", "stage", "river", "forest", "city",
          "garden", "station", "restaurant", "library", "mountain", "lake", "bridge", "store", "road", "yard"]
OBJECTS = ["ball", "bike", "guitar", "book", "camera", "bag", "kite", "phone", "sign", "cup",
           "umbrella", "basket", "box", "flag", "map", "rope", "drum", "board", "toy", "bottle"]
TIMES = ["today", "at night", "in the morning", "in the rain", "on a sunny day", "after lunch", "before dinner"]

# Verbs paired with objects that plausibly go with them.
VERB_OBJ = {
    "holding": OBJECTS,
    "carrying": ["bag", "box", "basket", "book", "bottle", "umbrella", "toy", "cup"],
    "throwing": ["ball", "kite", "toy", "rope"],
    "riding": ["bike", "board"],
    "playing": ["guitar", "drum", "ball"],
    "reading": ["book", "map", "sign"],
    "watching": ["kite", "sign", "flag", "crowd", "river", "stage"],
    "kicking": ["ball", "box"],
}
INTRANS = ["walking", "running", "sitting", "standing", "dancing", "sleeping", "waiting", "laughing",
           "jumping", "singing", "eating", "swimming", "climbing", "resting"]
PLACE_PREP = {"park": "in", "street": "on", "beach": "on", "kitchen": "in", "field": "in",
              "market": "at", "stage": "on", "river": "by", "forest": "in", "city": "in",
              "garden": "in", "station": "at", "restaurant": "in", "library": "in",
              "mountain": "on", "lake": "near", "bridge": "on", "store": "at", "road": "on", "yard": "in"}


def subject(r):
    parts = ["a"]
    if r.random() < 0.5:
        parts.append(r.choice(ADJ))
    parts.append(r.choice(PEOPLE))
    if r.random() < 0.4:
        parts += ["in", "a", r.choice(COLORS), r.choice(CLOTHES)]
    return parts


def place(r):
    p = r.choice(PLACES)
    return [PLACE_PREP[p], "the", p]


def sentence(r):
    kind = r.random()
    s = subject(r)
    plural = s[-1] in ("couple", "group", "crowd") and len(s) <= 3
    aux = "are" if plural else "is"
    if kind < 0.45:
        verb = r.choice(list(VERB_OBJ))
        obj = r.choice(VERB_OBJ[verb])
        col = [r.choice(COLORS)] if r.random() < 0.4 else []
        out = s + [aux, verb, "a"] + col + [obj]
        if r.random() < 0.6:
            out += place(r)
    elif kind < 0.8:
        out = s + [aux, r.choice(INTRANS)] + place(r)
        if r.random() < 0.3:
            out += r.choice(TIMES).split()
    elif kind < 0.9:
        other = subject(r)
        out = s + ["and"] + other + ["are", r.choice(INTRANS)] + place(r)
    else:
        out = ["there", "is"] + s + place(r)
    if r.random() < 0.15:
        out = out + [","] + r.choice(TIMES).split()
    return " ".join(out + ["."])


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 2021
    r = random.Random(seed)
    for _ in range(n):
        print(sentence(r))


if __name__ == "__main__":
    main()
