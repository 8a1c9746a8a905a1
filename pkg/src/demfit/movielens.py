"""Ratings-data ingestion and feature engineering.

Input is delimited text with one rating per line:

    user_id,movie_id,rating,timestamp,genre_bitfield

where genre_bitfield is a 19-character 0/1 string over GENRES (in order).
A converter from the common "::"-separated ratings.dat/movies.dat pair is
provided.  Feature building turns each user's rating history into one
mixed-model sample with six columns (X = Z):

  0-3  genre-category scores: the movie's flags for the genres mapped to
       the category, averaged over the category's genre list
  4    popularity: logit((l + 0.5) / (n + 1.0)) where n counts the movie's
       ratings among its 30 most recent strictly-earlier ratings (across
       all users) and l counts those rated above 3.  The current rating is
       excluded, so a movie's first rating scores logit(0.5/1.0) = 0.
  5    previous: 1 if the same user's previous rating was above 3, else 0
       (a user's first rating gets 0).
"""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .lmm import Sample

GENRES = (
    "Action",
    "Adventure",
    "Animation",
    "Children",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "IMAX",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
)

# IMAX belongs to no category; it is a format tag, not a genre.
CATEGORIES = (
    ("Action", ("Action", "Adventure", "Fantasy", "Horror", "Sci-Fi", "Thriller")),
    ("Children", ("Animation", "Children")),
    ("Comedy", ("Comedy",)),
    ("Drama", ("Crime", "Documentary", "Drama", "Film-Noir", "Musical", "Mystery",
               "Romance", "War", "Western")),
)

_GENRE_INDEX = {g: i for i, g in enumerate(GENRES)}
_VALID_RATINGS = {0.5 * k for k in range(1, 11)}
POPULARITY_WINDOW = 30


@dataclass(frozen=True)
class RatingsRecord:
    user_id: int
    movie_id: int
    rating: float
    timestamp: int
    genres: tuple  # 19 binary flags, GENRES order

    def __post_init__(self):
        if self.rating not in _VALID_RATINGS:
            raise ValueError(
                f"rating {self.rating} not on the 0.5..5.0 half-point grid"
            )
        if len(self.genres) != len(GENRES) or any(g not in (0, 1) for g in self.genres):
            raise ValueError("genres must be 19 binary flags")


def category_scores(genres: Sequence[int]) -> np.ndarray:
    """Four per-category means of the movie's genre flags."""
    return np.array(
        [
            sum(genres[_GENRE_INDEX[g]] for g in members) / len(members)
            for _, members in CATEGORIES
        ]
    )


def popularity_score(l: int, n: int) -> float:
    p = (l + 0.5) / (n + 1.0)
    return math.log(p / (1.0 - p))


def build_movielens_features(records: Iterable[RatingsRecord]) -> dict[int, Sample]:
    """Per-user Samples keyed by user id.

    Deterministic given the record set: records are processed in global
    (timestamp, user, movie) order regardless of input order.
    """
    recs = sorted(records, key=lambda r: (r.timestamp, r.user_id, r.movie_id))
    movie_hist: dict[int, deque] = defaultdict(lambda: deque(maxlen=POPULARITY_WINDOW))
    user_prev: dict[int, float] = {}
    rows: dict[int, list] = defaultdict(list)
    ys: dict[int, list] = defaultdict(list)
    for r in recs:
        hist = movie_hist[r.movie_id]
        n = len(hist)
        l = sum(1 for v in hist if v > 3.0)
        prev = user_prev.get(r.user_id)
        row = np.concatenate(
            [
                category_scores(r.genres),
                [popularity_score(l, n), 1.0 if (prev is not None and prev > 3.0) else 0.0],
            ]
        )
        rows[r.user_id].append(row)
        ys[r.user_id].append(r.rating)
        hist.append(r.rating)
        user_prev[r.user_id] = r.rating
    out = {}
    for uid in rows:
        X = np.vstack(rows[uid])
        out[uid] = Sample(y=np.array(ys[uid]), X=X, Z=X.copy())
    return out


# -- file formats ------------------------------------------------------------


def parse_line(line: str) -> RatingsRecord:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 5:
        raise ValueError(f"expected 5 comma-separated fields, got {len(parts)}")
    user, movie, rating, ts, bits = parts
    if len(bits) != len(GENRES) or set(bits) - {"0", "1"}:
        raise ValueError(f"bad genre bitfield {bits!r}")
    return RatingsRecord(
        user_id=int(user),
        movie_id=int(movie),
        rating=float(rating),
        timestamp=int(ts),
        genres=tuple(int(c) for c in bits),
    )


def read_ratings_file(path) -> list[RatingsRecord]:
    with open(path) as fh:
        return [parse_line(line) for line in fh if line.strip()]


def write_ratings_file(path, records: Iterable[RatingsRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            bits = "".join(str(g) for g in r.genres)
            fh.write(f"{r.user_id},{r.movie_id},{r.rating},{r.timestamp},{bits}\n")


def genre_bits_from_names(names: Iterable[str]) -> tuple:
    flags = [0] * len(GENRES)
    for name in names:
        name = name.strip()
        if name == "Children's":  # older dumps use the possessive form
            name = "Children"
        if name in ("", "(no genres listed)"):
            continue
        if name not in _GENRE_INDEX:
            raise ValueError(f"unknown genre {name!r}")
        flags[_GENRE_INDEX[name]] = 1
    return tuple(flags)


def convert_dat(ratings_path, movies_path, out_path) -> int:
    """Convert a "::"-separated ratings.dat/movies.dat pair to the delimited
    format above.  Returns the number of records written."""
    genres_by_movie = {}
    with open(movies_path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if not line.strip():
                continue
            movie_id, _title, genre_field = line.rstrip("\n").split("::")
            genres_by_movie[int(movie_id)] = genre_bits_from_names(
                genre_field.split("|")
            )
    count = 0
    with open(ratings_path) as fh, open(out_path, "w") as out:
        for line in fh:
            if not line.strip():
                continue
            user, movie, rating, ts = line.rstrip("\n").split("::")
            bits = "".join(str(g) for g in genres_by_movie[int(movie)])
            out.write(f"{int(user)},{int(movie)},{float(rating)},{int(ts)},{bits}\n")
            count += 1
    return count
