"""Label vocabularies shared by the data, model and analysis code."""

MANEUVERS = ("ST", "RT", "LT", "RLC", "LLC", "SS", "UT")
MANEUVER_NAMES = {
    "ST": "go straight",
    "RT": "right turn",
    "LT": "left turn",
    "RLC": "right lane change",
    "LLC": "left lane change",
    "SS": "slow/stop",
    "UT": "U-turn",
}

EGO_EXPLANATIONS = (
    "traffic light is green",
    "traffic light is red",
    "a left turn coming ahead",
    "a right turn coming ahead",
    "left lane is clear",
    "right lane is clear",
    "slow vehicle ahead in the lane",
    "pedestrian crossing ahead",
    "road is clear ahead",
    "U-turn is permitted ahead",
    "median opening ahead",
    "ego-vehicle is nearing the intersection",
    "speed breaker ahead",
    "following the lead vehicle",
    "turn indicator is blinking",
    "hazard lights flashing ahead",
    "traffic merging from the side",
)

GAZE_EXPLANATIONS = (
    "towards the upper far-left side",
    "towards the upper left side",
    "towards the upper forward direction",
    "towards the upper right side",
    "towards the upper far-right side",
    "to the far-left side",
    "to the left side",
    "towards the forward direction",
    "to the right side",
    "to the far-right side",
    "towards the lower far-left side",
    "towards the lower left side",
    "towards the lower forward direction",
    "towards the lower right side",
    "towards the lower far-right side",
)

N_MANEUVERS = len(MANEUVERS)
N_EXPLANATIONS = len(EGO_EXPLANATIONS)
N_GAZE = len(GAZE_EXPLANATIONS)

assert N_MANEUVERS == 7 and N_EXPLANATIONS == 17 and N_GAZE == 15
