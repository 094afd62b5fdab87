//! The shipped demo rig: 40 markers, 24 channels, 7 regions.
//!
//! Geometry is a stylized face in centimetre-like model units, +x toward the
//! actor's left, +y up, +z out of the face. Deltas are hand-authored per
//! channel; left-side channels mirror the right-side ones through x = 0.

use std::collections::BTreeMap;

use crate::io::NoiseProfile;
use crate::rig::{Channel, Corrective, Inbetween, MarkerSet, Region, Rig};

const MARKERS: [(&str, [f64; 3]); 40] = [
    ("noseBridge", [0.0, 4.0, 3.0]),
    ("browInnerR", [-1.5, 5.5, 2.6]),
    ("browInnerL", [1.5, 5.5, 2.6]),
    ("browMidR", [-3.5, 5.8, 2.0]),
    ("browMidL", [3.5, 5.8, 2.0]),
    ("browOuterR", [-5.2, 5.2, 1.0]),
    ("browOuterL", [5.2, 5.2, 1.0]),
    ("foreheadR", [-2.5, 7.5, 2.2]),
    ("foreheadL", [2.5, 7.5, 2.2]),
    ("upperLidR", [-3.2, 3.9, 2.1]),
    ("upperLidL", [3.2, 3.9, 2.1]),
    ("lowerLidR", [-3.2, 2.9, 2.1]),
    ("lowerLidL", [3.2, 2.9, 2.1]),
    ("pupilR", [-3.2, 3.4, 2.3]),
    ("pupilL", [3.2, 3.4, 2.3]),
    ("cheekUpperR", [-4.2, 1.5, 1.8]),
    ("cheekUpperL", [4.2, 1.5, 1.8]),
    ("cheekLowerR", [-4.8, -1.5, 1.5]),
    ("cheekLowerL", [4.8, -1.5, 1.5]),
    ("nostrilR", [-1.2, 0.3, 3.6]),
    ("nostrilL", [1.2, 0.3, 3.6]),
    ("nasolabialR", [-2.6, -1.0, 2.8]),
    ("nasolabialL", [2.6, -1.0, 2.8]),
    ("mouthCornerR", [-2.4, -3.0, 2.6]),
    ("mouthCornerL", [2.4, -3.0, 2.6]),
    ("upperLipMid", [0.0, -2.2, 3.8]),
    ("upperLipR", [-1.2, -2.4, 3.5]),
    ("upperLipL", [1.2, -2.4, 3.5]),
    ("lowerLipMid", [0.0, -3.8, 3.6]),
    ("lowerLipR", [-1.2, -3.6, 3.4]),
    ("lowerLipL", [1.2, -3.6, 3.4]),
    ("chin", [0.0, -6.5, 3.2]),
    ("chinR", [-1.8, -6.0, 2.8]),
    ("chinL", [1.8, -6.0, 2.8]),
    ("jawR", [-5.0, -4.5, 0.5]),
    ("jawL", [5.0, -4.5, 0.5]),
    ("jawLowerR", [-3.5, -6.0, 1.5]),
    ("jawLowerL", [3.5, -6.0, 1.5]),
    ("mentalis", [0.0, -5.0, 3.4]),
    ("underChin", [0.0, -8.0, 1.5]),
];

pub const NOSE_BRIDGE: usize = 0;

const BROW: [usize; 8] = [1, 2, 3, 4, 5, 6, 7, 8];
const LIDS: [usize; 4] = [9, 10, 11, 12];
const PUPILS: [usize; 2] = [13, 14];
const MIDFACE: [usize; 8] = [15, 16, 17, 18, 19, 20, 21, 22];
const LIPS: [usize; 8] = [23, 24, 25, 26, 27, 28, 29, 30];
const CHIN_JAW: [usize; 9] = [31, 32, 33, 34, 35, 36, 37, 38, 39];

fn marker(name: &str) -> usize {
    MARKERS
        .iter()
        .position(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("unknown demo marker {name}"))
}

/// Mirror partner of a marker (itself for midline markers).
fn mirror(i: usize) -> usize {
    let name = MARKERS[i].0;
    let swapped = if let Some(stem) = name.strip_suffix('R') {
        format!("{stem}L")
    } else if let Some(stem) = name.strip_suffix('L') {
        format!("{stem}R")
    } else {
        return i;
    };
    MARKERS
        .iter()
        .position(|(n, _)| *n == swapped)
        .unwrap_or(i)
}

type Moves = Vec<(&'static str, [f64; 3])>;

fn delta_from(moves: &[(&str, [f64; 3])]) -> Vec<f64> {
    let mut d = vec![0.0; 3 * MARKERS.len()];
    for (name, v) in moves {
        let i = marker(name);
        for a in 0..3 {
            d[3 * i + a] += v[a];
        }
    }
    d
}

fn mirrored(delta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; delta.len()];
    for i in 0..MARKERS.len() {
        let j = mirror(i);
        out[3 * j] = -delta[3 * i];
        out[3 * j + 1] = delta[3 * i + 1];
        out[3 * j + 2] = delta[3 * i + 2];
    }
    out
}

fn channel(name: &str, moves: Moves) -> Channel {
    Channel {
        name: name.to_string(),
        delta: delta_from(&moves),
        inbetweens: Vec::new(),
    }
}

fn with_inbetween(mut ch: Channel, t: f64, moves: Moves) -> Channel {
    ch.inbetweens.push(Inbetween {
        t,
        delta: delta_from(&moves),
    });
    ch
}

fn mirror_channel(ch: &Channel, name: &str) -> Channel {
    Channel {
        name: name.to_string(),
        delta: mirrored(&ch.delta),
        inbetweens: ch
            .inbetweens
            .iter()
            .map(|ib| Inbetween {
                t: ib.t,
                delta: mirrored(&ib.delta),
            })
            .collect(),
    }
}

fn with_nose(markers: &[&[usize]]) -> Vec<usize> {
    let mut v = vec![NOSE_BRIDGE];
    for group in markers {
        v.extend_from_slice(group);
    }
    v
}

/// Builds the demo rig.
pub fn demo_rig() -> Rig {
    let inner_brow_r = channel(
        "innerBrowRaiserR",
        vec![
            ("browInnerR", [0.0, 0.8, 0.05]),
            ("browMidR", [0.0, 0.3, 0.0]),
            ("foreheadR", [0.0, 0.35, 0.0]),
        ],
    );
    let outer_brow_r = channel(
        "outerBrowRaiserR",
        vec![
            ("browOuterR", [0.0, 0.8, 0.1]),
            ("browMidR", [0.0, 0.5, 0.05]),
            ("foreheadR", [0.0, 0.2, 0.0]),
        ],
    );
    let brow_lowerer = channel(
        "browLowerer",
        vec![
            ("browInnerR", [0.3, -0.6, 0.1]),
            ("browInnerL", [-0.3, -0.6, 0.1]),
            ("browMidR", [0.1, -0.4, 0.0]),
            ("browMidL", [-0.1, -0.4, 0.0]),
            ("foreheadR", [0.05, -0.15, 0.0]),
            ("foreheadL", [-0.05, -0.15, 0.0]),
        ],
    );
    let cheek_raiser_r = channel(
        "cheekRaiserR",
        vec![
            ("cheekUpperR", [-0.1, 0.6, 0.3]),
            ("cheekLowerR", [-0.1, 0.4, 0.2]),
            ("nasolabialR", [-0.2, 0.3, 0.1]),
            ("lowerLidR", [0.0, 0.2, 0.05]),
            ("mouthCornerR", [-0.15, 0.25, 0.0]),
        ],
    );
    let nose_wrinkler = channel(
        "noseWrinkler",
        vec![
            ("nostrilR", [0.1, 0.5, -0.1]),
            ("nostrilL", [-0.1, 0.5, -0.1]),
            ("nasolabialR", [0.1, 0.4, 0.0]),
            ("nasolabialL", [-0.1, 0.4, 0.0]),
            ("browInnerR", [0.1, -0.2, 0.0]),
            ("browInnerL", [-0.1, -0.2, 0.0]),
            ("upperLipMid", [0.0, 0.2, 0.0]),
        ],
    );
    let cheek_puff = channel(
        "cheekPuff",
        vec![
            ("cheekLowerR", [-0.8, 0.0, 0.5]),
            ("cheekLowerL", [0.8, 0.0, 0.5]),
            ("cheekUpperR", [-0.3, 0.0, 0.2]),
            ("cheekUpperL", [0.3, 0.0, 0.2]),
            ("nasolabialR", [-0.3, 0.0, 0.3]),
            ("nasolabialL", [0.3, 0.0, 0.3]),
        ],
    );
    let mut jaw_open_moves: Moves = vec![
        ("chin", [0.0, -2.5, -0.6]),
        ("chinR", [0.0, -2.4, -0.6]),
        ("chinL", [0.0, -2.4, -0.6]),
        ("mentalis", [0.0, -2.2, -0.5]),
        ("underChin", [0.0, -2.3, -0.9]),
        ("jawLowerR", [0.1, -1.6, -0.3]),
        ("jawLowerL", [-0.1, -1.6, -0.3]),
        ("jawR", [0.0, -0.8, -0.1]),
        ("jawL", [0.0, -0.8, -0.1]),
        ("lowerLipMid", [0.0, -2.0, -0.4]),
        ("lowerLipR", [0.0, -1.9, -0.4]),
        ("lowerLipL", [0.0, -1.9, -0.4]),
        ("mouthCornerR", [0.2, -0.8, -0.1]),
        ("mouthCornerL", [-0.2, -0.8, -0.1]),
    ];
    // The jaw rotates about its hinge: at half opening the chin has moved
    // less than half the full distance and sits further forward.
    let jaw_half: Moves = jaw_open_moves
        .iter()
        .map(|(n, v)| (*n, [0.45 * v[0], 0.4 * v[1], 0.1 * v[2].abs()]))
        .collect();
    let jaw_open = with_inbetween(channel("jawOpen", std::mem::take(&mut jaw_open_moves)), 0.5, jaw_half);
    let jaw_sideway = channel(
        "jawSideway",
        vec![
            ("chin", [1.0, 0.0, 0.0]),
            ("chinR", [1.0, 0.05, 0.1]),
            ("chinL", [1.0, -0.05, -0.1]),
            ("mentalis", [0.9, 0.0, 0.0]),
            ("underChin", [0.9, 0.0, 0.0]),
            ("jawLowerR", [0.7, 0.0, 0.2]),
            ("jawLowerL", [0.7, 0.0, -0.2]),
            ("jawR", [0.4, 0.0, 0.1]),
            ("jawL", [0.4, 0.0, -0.1]),
            ("lowerLipMid", [0.8, 0.0, 0.0]),
            ("lowerLipR", [0.8, 0.0, 0.0]),
            ("lowerLipL", [0.8, 0.0, 0.0]),
            ("mouthCornerR", [0.3, 0.0, 0.0]),
            ("mouthCornerL", [0.3, 0.0, 0.0]),
        ],
    );
    let jaw_thrust = channel(
        "jawThrust",
        vec![
            ("chin", [0.0, 0.1, 1.0]),
            ("chinR", [0.0, 0.1, 1.0]),
            ("chinL", [0.0, 0.1, 1.0]),
            ("mentalis", [0.0, 0.1, 0.9]),
            ("underChin", [0.0, 0.0, 1.0]),
            ("jawLowerR", [0.0, 0.0, 0.6]),
            ("jawLowerL", [0.0, 0.0, 0.6]),
            ("jawR", [0.0, 0.0, 0.4]),
            ("jawL", [0.0, 0.0, 0.4]),
            ("lowerLipMid", [0.0, 0.05, 0.8]),
            ("lowerLipR", [0.0, 0.05, 0.8]),
            ("lowerLipL", [0.0, 0.05, 0.8]),
        ],
    );
    let lip_raiser = channel(
        "lipRaiser",
        vec![
            ("upperLipMid", [0.0, 0.5, 0.2]),
            ("upperLipR", [0.0, 0.5, 0.15]),
            ("upperLipL", [0.0, 0.5, 0.15]),
            ("nasolabialR", [0.0, 0.2, 0.05]),
            ("nasolabialL", [0.0, 0.2, 0.05]),
            ("mouthCornerR", [0.0, 0.15, 0.0]),
            ("mouthCornerL", [0.0, 0.15, 0.0]),
        ],
    );
    let lip_depressor = channel(
        "lipDepressor",
        vec![
            ("lowerLipMid", [0.0, -0.5, 0.1]),
            ("lowerLipR", [0.0, -0.55, 0.1]),
            ("lowerLipL", [0.0, -0.55, 0.1]),
            ("mouthCornerR", [-0.05, -0.2, 0.0]),
            ("mouthCornerL", [0.05, -0.2, 0.0]),
            ("mentalis", [0.0, -0.15, 0.0]),
        ],
    );
    let chin_raiser = channel(
        "chinRaiser",
        vec![
            ("chin", [0.0, 0.6, 0.3]),
            ("mentalis", [0.0, 0.5, 0.4]),
            ("chinR", [0.0, 0.3, 0.15]),
            ("chinL", [0.0, 0.3, 0.15]),
            ("lowerLipMid", [0.0, 0.3, 0.2]),
            ("lowerLipR", [0.0, 0.25, 0.2]),
            ("lowerLipL", [0.0, 0.25, 0.2]),
        ],
    );
    let lip_pressor = channel(
        "lipPressor",
        vec![
            ("upperLipMid", [0.0, -0.2, -0.1]),
            ("upperLipR", [0.0, -0.2, -0.1]),
            ("upperLipL", [0.0, -0.2, -0.1]),
            ("lowerLipMid", [0.0, 0.2, -0.1]),
            ("lowerLipR", [0.0, 0.2, -0.1]),
            ("lowerLipL", [0.0, 0.2, -0.1]),
            ("mouthCornerR", [-0.1, 0.0, -0.1]),
            ("mouthCornerL", [0.1, 0.0, -0.1]),
        ],
    );
    let pucker_r = with_inbetween(
        channel(
            "lipPuckererR",
            vec![
                ("mouthCornerR", [0.8, 0.0, 0.4]),
                ("upperLipR", [0.3, 0.0, 0.4]),
                ("lowerLipR", [0.3, 0.0, 0.4]),
                ("upperLipMid", [0.05, 0.0, 0.2]),
                ("lowerLipMid", [0.05, 0.0, 0.2]),
            ],
        ),
        0.6,
        vec![
            ("mouthCornerR", [0.35, 0.0, 0.1]),
            ("upperLipR", [0.1, 0.0, 0.2]),
            ("lowerLipR", [0.1, 0.0, 0.2]),
            ("upperLipMid", [0.0, 0.0, 0.1]),
            ("lowerLipMid", [0.0, 0.0, 0.1]),
        ],
    );
    let funneler = channel(
        "lipFunneler",
        vec![
            ("upperLipMid", [0.0, 0.3, 0.6]),
            ("lowerLipMid", [0.0, -0.3, 0.6]),
            ("upperLipR", [0.1, 0.2, 0.4]),
            ("upperLipL", [-0.1, 0.2, 0.4]),
            ("lowerLipR", [0.1, -0.2, 0.4]),
            ("lowerLipL", [-0.1, -0.2, 0.4]),
            ("mouthCornerR", [0.4, 0.0, 0.2]),
            ("mouthCornerL", [-0.4, 0.0, 0.2]),
        ],
    );
    let tightener = channel(
        "lipTightener",
        vec![
            ("upperLipMid", [0.0, -0.15, -0.3]),
            ("lowerLipMid", [0.0, 0.15, -0.3]),
            ("upperLipR", [-0.05, -0.1, -0.25]),
            ("upperLipL", [0.05, -0.1, -0.25]),
            ("lowerLipR", [-0.05, 0.1, -0.25]),
            ("lowerLipL", [0.05, 0.1, -0.25]),
            ("mouthCornerR", [-0.3, 0.0, -0.1]),
            ("mouthCornerL", [0.3, 0.0, -0.1]),
        ],
    );
    let eye_close_r = with_inbetween(
        channel(
            "eyeCloseR",
            vec![("upperLidR", [0.0, -0.9, 0.1]), ("lowerLidR", [0.0, 0.15, 0.0])],
        ),
        0.5,
        vec![("upperLidR", [0.0, -0.5, 0.25]), ("lowerLidR", [0.0, 0.05, 0.0])],
    );
    let eye_lr = channel(
        "eyeLeftRight",
        vec![
            ("pupilR", [0.4, 0.0, -0.05]),
            ("pupilL", [0.4, 0.0, -0.05]),
            ("upperLidR", [0.1, 0.0, 0.0]),
            ("upperLidL", [0.1, 0.0, 0.0]),
        ],
    );
    let eye_ud = channel(
        "eyeUpDown",
        vec![
            ("pupilR", [0.0, 0.35, -0.05]),
            ("pupilL", [0.0, 0.35, -0.05]),
            ("upperLidR", [0.0, 0.2, 0.0]),
            ("upperLidL", [0.0, 0.2, 0.0]),
        ],
    );

    let channels = vec![
        // jaw 0..3
        jaw_open,
        jaw_sideway,
        jaw_thrust,
        // upper-face 3..8
        mirror_channel(&inner_brow_r, "innerBrowRaiserL"),
        inner_brow_r,
        mirror_channel(&outer_brow_r, "outerBrowRaiserL"),
        outer_brow_r,
        brow_lowerer,
        // lower-face 8..12
        lip_raiser,
        lip_depressor,
        chin_raiser,
        lip_pressor,
        // lips 12..16
        mirror_channel(&pucker_r, "lipPuckererL"),
        pucker_r,
        funneler,
        tightener,
        // cheek 16..20
        mirror_channel(&cheek_raiser_r, "cheekRaiserL"),
        cheek_raiser_r,
        nose_wrinkler,
        cheek_puff,
        // eye-lids 20..22
        mirror_channel(&eye_close_r, "eyeCloseL"),
        eye_close_r,
        // eyeballs 22..24
        eye_lr,
        eye_ud,
    ];
    let idx = |name: &str| channels.iter().position(|c| c.name == name).unwrap();

    let correctives = vec![
        Corrective {
            i: idx("jawOpen"),
            j: idx("lipFunneler"),
            delta: delta_from(&[
                ("upperLipMid", [0.0, 0.1, 0.3]),
                ("lowerLipMid", [0.0, -0.2, 0.3]),
                ("upperLipR", [0.05, 0.05, 0.2]),
                ("upperLipL", [-0.05, 0.05, 0.2]),
                ("lowerLipR", [0.05, -0.15, 0.2]),
                ("lowerLipL", [-0.05, -0.15, 0.2]),
            ]),
        },
        Corrective {
            i: idx("innerBrowRaiserR"),
            j: idx("browLowerer"),
            delta: delta_from(&[("browInnerR", [0.15, 0.3, 0.05])]),
        },
        Corrective {
            i: idx("innerBrowRaiserL"),
            j: idx("browLowerer"),
            delta: delta_from(&[("browInnerL", [-0.15, 0.3, 0.05])]),
        },
        Corrective {
            i: idx("cheekRaiserR"),
            j: idx("cheekRaiserL"),
            delta: delta_from(&[("nostrilR", [0.0, 0.1, 0.0]), ("nostrilL", [0.0, 0.1, 0.0])]),
        },
    ];

    let upper = with_nose(&[&BROW, &MIDFACE]);
    let lower = with_nose(&[&[21, 22], &LIPS, &CHIN_JAW]);
    let region_channels: [(&str, Vec<usize>, Vec<usize>); 7] = [
        ("jaw", with_nose(&[&LIPS[..2], &[28], &CHIN_JAW]), (0..3).collect()),
        ("upper-face", upper.clone(), (3..8).collect()),
        ("lower-face", lower.clone(), (8..12).collect()),
        ("lips", lower, (12..16).collect()),
        ("cheek", upper, (16..20).collect()),
        ("eye-lids", with_nose(&[&BROW[..2], &LIDS]), (20..22).collect()),
        ("eyeballs", with_nose(&[&LIDS, &PUPILS]), (22..24).collect()),
    ];
    let regions: BTreeMap<String, Region> = region_channels
        .into_iter()
        .map(|(name, markers, channels)| (name.to_string(), Region { markers, channels }))
        .collect();

    let points: Vec<[f64; 3]> = MARKERS.iter().map(|(_, p)| *p).collect();
    let rig = Rig {
        name: "demo-face".into(),
        neutral: MarkerSet::from_points(&points).expect("finite"),
        nose_bridge_index: NOSE_BRIDGE,
        channels,
        correctives,
        regions,
    };
    rig.validate().expect("demo rig is valid");
    rig
}

pub fn marker_names() -> Vec<&'static str> {
    MARKERS.iter().map(|(n, _)| *n).collect()
}

/// Default augmentation profile: lower-face markers jitter 3x the nose bridge.
pub fn default_noise_profile(seed: u64) -> NoiseProfile {
    const BASE: f64 = 0.01;
    let stds = (0..MARKERS.len())
        .map(|i| {
            let s = if i == NOSE_BRIDGE {
                BASE
            } else if LIPS.contains(&i) || CHIN_JAW.contains(&i) {
                3.0 * BASE
            } else {
                2.0 * BASE
            };
            [s; 3]
        })
        .collect();
    NoiseProfile { stds, seed }
}
