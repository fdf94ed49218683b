from typing import Any

METRIC_SCHEMA: dict[str, dict[str, Any]] = {
    "dice_init": {
        "label": "Dice (init)",
        "group": "dice",
        "higherIsBetter": True,
        "test": "wilcoxon",
        "scale": "unit",
    },
    "dice_final": {
        "label": "Dice (final)",
        "group": "dice",
        "higherIsBetter": True,
        "test": "wilcoxon",
        "scale": "unit",
    },
    "dice_nauc": {
        "label": "Dice nAUC",
        "group": "dice",
        "higherIsBetter": True,
        "test": "wilcoxon",
        "scale": "unit",
    },
    "nsd_init": {
        "label": "NSD (init)",
        "group": "nsd",
        "higherIsBetter": True,
        "test": "wilcoxon",
        "scale": "unit",
    },
    "nsd_final": {
        "label": "NSD (final)",
        "group": "nsd",
        "higherIsBetter": True,
        "test": "wilcoxon",
        "scale": "unit",
    },
    "nsd_nauc": {
        "label": "NSD nAUC",
        "group": "nsd",
        "higherIsBetter": True,
        "test": "wilcoxon",
        "scale": "unit",
    },
    "nnoi": {
        "label": "nNoI",
        "group": "noi",
        "higherIsBetter": False,
        "test": "wilcoxon",
        "scale": "percent",
    },
    "nof": {
        "label": "NoF",
        "group": "noi",
        "higherIsBetter": False,
        "test": "mcnemar",
        "scale": "percent",
    },
}

SUMMARY_COLUMNS = tuple(METRIC_SCHEMA)


def higher_is_better(metric: str) -> bool:
    return METRIC_SCHEMA[metric]["higherIsBetter"]


def is_binary(metric: str) -> bool:
    return METRIC_SCHEMA[metric]["test"] == "mcnemar"
