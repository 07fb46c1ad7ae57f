"""Regenerate the bundled maps and scenario files under src/crowdnav/data.

Maps are drawn as carved free rectangles inside solid rock at 0.1 m/cell.
Run from the repository root: ``python scripts/make_fixtures.py``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from crowdnav.gridmap import CellState, OccupancyGrid, save_map

RES = 0.1
DATA = Path(__file__).resolve().parents[1] / "src" / "crowdnav" / "data"


class Canvas:
    def __init__(self, w_m: float, h_m: float):
        self.cells = np.full((int(round(h_m / RES)), int(round(w_m / RES))), CellState.OCCUPIED, dtype=np.uint8)

    def _idx(self, x0, y0, x1, y1):
        return slice(int(round(y0 / RES)), int(round(y1 / RES))), slice(int(round(x0 / RES)), int(round(x1 / RES)))

    def free(self, x0, y0, x1, y1):
        self.cells[self._idx(x0, y0, x1, y1)] = CellState.FREE

    def block(self, x0, y0, x1, y1):
        self.cells[self._idx(x0, y0, x1, y1)] = CellState.OCCUPIED

    def grid(self) -> OccupancyGrid:
        return OccupancyGrid(self.cells, RES, (0.0, 0.0))


def corridor() -> OccupancyGrid:
    """32 x 12 m: a 3 m hall with evenly spaced alcoves on both sides and distinct end lobbies."""
    c = Canvas(32, 12)
    c.free(1.0, 4.5, 31.0, 7.5)
    for xc in (7.0, 11.0, 15.0, 19.0, 23.0):
        c.free(xc - 0.8, 3.0, xc + 0.8, 4.5)
        c.free(xc - 0.8, 7.5, xc + 0.8, 9.0)
    # west lobby with one pillar and a niche
    c.free(1.0, 1.5, 4.5, 10.5)
    c.block(2.4, 8.2, 3.0, 8.8)
    c.free(1.0, 10.5, 2.0, 11.2)
    # east lobby, L-shaped, with two pillars
    c.free(27.0, 1.0, 31.0, 10.0)
    c.free(24.5, 8.0, 27.0, 10.0)
    c.block(28.0, 2.5, 28.6, 3.1)
    c.block(29.4, 7.6, 30.0, 8.2)
    return c.grid()


def supermarket() -> OccupancyGrid:
    """30 x 15 m hall with parallel shelf lanes and a checkout row."""
    c = Canvas(30, 15)
    c.free(1.0, 1.0, 29.0, 14.0)
    for x in (7.0, 10.5, 14.0, 17.5, 21.0):
        c.block(x, 5.0, x + 1.0, 12.0)
    for x in (4.0, 8.0, 12.0):
        c.block(x, 2.2, x + 1.8, 2.8)
    c.block(25.0, 6.0, 27.0, 8.0)
    return c.grid()


def airport() -> OccupancyGrid:
    """30 x 15 m open hall split by a wall with narrow gate aisles."""
    c = Canvas(30, 15)
    c.free(1.0, 1.0, 29.0, 14.0)
    c.block(14.5, 1.0, 15.5, 14.0)
    for yc in (3.0, 7.5, 12.0):
        c.free(14.5, yc - 0.6, 15.5, yc + 0.6)
    for x, y in ((6.0, 4.0), (6.0, 10.0), (22.0, 5.0), (24.0, 10.0)):
        c.block(x, y, x + 1.2, y + 1.2)
    return c.grid()


def empty_room() -> OccupancyGrid:
    c = Canvas(10, 10)
    c.free(0.5, 0.5, 9.5, 9.5)
    return c.grid()


def office() -> OccupancyGrid:
    """20 x 14 m office: three rooms off a hallway plus free-standing blocks (12 corner structures)."""
    c = Canvas(20, 14)
    c.free(1.0, 6.0, 19.0, 8.0)  # hallway
    for x0 in (1.0, 7.5, 14.0):  # rooms north and south
        c.free(x0, 9.0, x0 + 5.0, 13.0)
        c.free(x0 + 2.0, 8.0, x0 + 3.0, 9.0)
        c.free(x0, 1.0, x0 + 5.0, 5.0)
        c.free(x0 + 2.0, 5.0, x0 + 3.0, 6.0)
    for x0, y0 in ((2.0, 10.5), (9.0, 2.5), (15.5, 11.0)):
        c.block(x0, y0, x0 + 1.0, y0 + 1.0)
    return c.grid()


def scenario_doc(name, start, goal, count, routes, paper_count, area_ratio, rp=True, timeout=180.0):
    doc = {
        "name": name,
        "map": f"../maps/{name}.pgm",
        "seed": 0,
        "robot": {"start": list(start), "goal": list(goal), "radius": 0.17, "v_max": 1.0, "w_max": 1.5708},
        "pedestrians": {
            "count": count,
            "radius": 0.3,
            "speed_range": [0.6, 1.4],
            "lateral_spread": 0.5,
            "routes": [{"waypoints": [list(p) for p in r], "loop": True} for r in routes],
            "paper_count": paper_count,
            "area_ratio": area_ratio,
        },
        "noise": {"scan_sigma": 0.05, "odom_alpha": [0.05, 0.01, 0.05, 0.01]},
        "episode": {"timeout": timeout, "dt": 0.1},
    }
    if rp:
        doc["recovery_points"] = f"../maps/{name}.rp.csv"
    return doc


def free_area(g: OccupancyGrid) -> float:
    return float(g.free.sum()) * g.resolution ** 2


def main() -> None:
    maps = {"corridor": corridor(), "supermarket": supermarket(), "airport": airport(),
            "empty_room": empty_room(), "office": office()}
    (DATA / "maps").mkdir(parents=True, exist_ok=True)
    (DATA / "scenarios").mkdir(parents=True, exist_ok=True)
    for name, g in maps.items():
        save_map(g, DATA / "maps" / f"{name}.pgm")

    # Desk-scale crowd sizes stand in for the full-size counts; the area ratio
    # assumes a full-size free area of 2000 m^2 for each environment.
    full_area = 2000.0
    scen = {
        "corridor": scenario_doc(
            "corridor", (2.5, 6.0, 0.0), (29.5, 6.0), 20,
            [[(3.0, 5.2), (29.5, 5.2)], [(29.5, 6.8), (3.0, 6.8)], [(29.0, 6.0), (2.5, 6.0)],
             [(11.0, 8.3), (11.0, 5.0), (19.0, 3.7), (19.0, 7.0)]],
            150, round(free_area(maps["corridor"]) / full_area, 4)),
        "supermarket": scenario_doc(
            "supermarket", (2.0, 7.5, 0.0), (27.5, 12.5), 25,
            [[(2.5, 4.0), (27.5, 4.0)], [(9.25, 13.0), (9.25, 4.0)], [(16.0, 4.0), (16.0, 13.0)],
             [(27.5, 13.0), (2.5, 13.0)], [(19.25, 4.0), (19.25, 13.0)]],
            150, round(free_area(maps["supermarket"]) / full_area, 4)),
        "airport": scenario_doc(
            "airport", (3.0, 7.5, 0.0), (27.0, 7.5), 25,
            [[(3.0, 3.0), (27.0, 3.0)], [(27.0, 7.5), (3.0, 7.5)], [(3.0, 12.0), (27.0, 12.0)],
             [(10.0, 2.0), (10.0, 13.0)], [(20.0, 13.0), (20.0, 2.0)]],
            150, round(free_area(maps["airport"]) / full_area, 4)),
        "empty_room": scenario_doc("empty_room", (2.0, 2.0, 0.0), (8.0, 8.0), 0, [], 0, 0.0, rp=False,
                                   timeout=60.0),
    }
    for name, doc in scen.items():
        path = DATA / "scenarios" / f"{name}.yaml"
        path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


if __name__ == "__main__":
    main()
