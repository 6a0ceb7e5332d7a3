from __future__ import annotations

from enum import Enum


class Occlusion(str, Enum):
    HOLISTIC = "Holistic"
    NPO = "NPO"          # occluded by an object
    NTP = "NTP"          # occluded by another pedestrian
    UNLABELED = "Unlabeled"

    @classmethod
    def parse(cls, value) -> "Occlusion":
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        for member in cls:
            if member.value.lower() == text.lower():
                return member
        raise ValueError(f"unknown occlusion label {value!r}")

    @property
    def occluded(self) -> bool:
        return self in (Occlusion.NPO, Occlusion.NTP)
