//! Hierarchical-B GOP planning: frame types, coding order, and references
//! for configurable GOP size and intra-period, with B*-frames at GOP
//! boundaries.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    I,
    RefB,
    NonRefB,
    BStar,
}

impl FrameKind {
    pub fn code(self) -> u8 {
        match self {
            FrameKind::I => 0,
            FrameKind::RefB => 1,
            FrameKind::NonRefB => 2,
            FrameKind::BStar => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => FrameKind::I,
            1 => FrameKind::RefB,
            2 => FrameKind::NonRefB,
            3 => FrameKind::BStar,
            _ => return Err(Error::Bitstream(format!("unknown frame type code {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::I => "I",
            FrameKind::RefB => "REF_B",
            FrameKind::NonRefB => "NONREF_B",
            FrameKind::BStar => "BSTAR",
        }
    }
}

/// One frame's slot in the schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePlan {
    pub display_index: u32,
    pub coding_order_index: u32,
    pub kind: FrameKind,
    /// Reference display indices: empty for I, [prev] for B*, [prev, next]
    /// for B.
    pub refs: Vec<u32>,
    /// 0 for anchors (I/B*), increasing toward the deepest bisection level.
    pub hierarchy_level: u32,
}

/// Ordered schedule covering every display index exactly once, stored in
/// coding order (references always precede dependents).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopPlan {
    frames: Vec<FramePlan>,
}

impl GopPlan {
    /// Frames in coding order.
    pub fn coded(&self) -> &[FramePlan] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn by_display(&self, display_index: u32) -> Option<&FramePlan> {
        self.frames.iter().find(|f| f.display_index == display_index)
    }

    /// Display indices in coding order.
    pub fn coding_order(&self) -> Vec<u32> {
        self.frames.iter().map(|f| f.display_index).collect()
    }

    /// Topological validity: every reference is coded before its dependent,
    /// each display index appears exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, f) in self.frames.iter().enumerate() {
            if f.coding_order_index != i as u32 {
                return Err(Error::Contract(format!(
                    "frame {} has coding_order_index {} at position {i}",
                    f.display_index, f.coding_order_index
                )));
            }
            for r in &f.refs {
                if !seen.contains(r) {
                    return Err(Error::Contract(format!(
                        "frame {} references {} before it is coded",
                        f.display_index, r
                    )));
                }
            }
            if !seen.insert(f.display_index) {
                return Err(Error::Contract(format!(
                    "display index {} appears twice",
                    f.display_index
                )));
            }
            match f.kind {
                FrameKind::I => {
                    if !f.refs.is_empty() {
                        return Err(Error::Contract("I-frame with references".into()));
                    }
                }
                FrameKind::BStar => {
                    if f.refs.len() != 1 {
                        return Err(Error::Contract("B*-frame needs one reference".into()));
                    }
                }
                _ => {
                    if f.refs.len() != 2 {
                        return Err(Error::Contract("B-frame needs two references".into()));
                    }
                    // references bracket the frame at equal distance
                    let d = f.display_index;
                    if f.refs[0] >= d || f.refs[1] <= d || d - f.refs[0] != f.refs[1] - d {
                        return Err(Error::Contract(format!(
                            "B-frame {} references {:?} are not equidistant",
                            d, f.refs
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn is_power_of_two(v: u32) -> bool {
    v != 0 && v & (v - 1) == 0
}

/// Number of frames to code from an `available`-frame source so the coded
/// sequence is one leading I-frame plus whole intra-periods.
pub fn trim_to_intra_periods(available: u32, intra_period: u32) -> u32 {
    if available == 0 {
        return 0;
    }
    let periods = (available - 1) / intra_period;
    1 + periods * intra_period
}

/// Plans `num_frames` display indices with hierarchical-B coding.
///
/// Frame 0 and every multiple of `intra_period` are I-frames. Within an
/// intra-period, frames at multiples of `gop_size` are B*-frames referencing
/// the frame one GOP earlier; the rest are hierarchical B-frames by
/// recursive bisection, the deepest level being non-reference. A trailing
/// partial intra-period is covered by the largest power-of-two GOPs that
/// fit.
pub fn plan(num_frames: u32, gop_size: u32, intra_period: u32) -> Result<GopPlan> {
    if num_frames == 0 {
        return Err(Error::InvalidConfig("empty sequence".into()));
    }
    if !is_power_of_two(gop_size) || !is_power_of_two(intra_period) {
        return Err(Error::InvalidConfig(format!(
            "gop_size {gop_size} and intra_period {intra_period} must be powers of two"
        )));
    }
    if gop_size > intra_period {
        return Err(Error::InvalidConfig(format!(
            "gop_size {gop_size} exceeds intra_period {intra_period}"
        )));
    }
    let mut frames = Vec::with_capacity(num_frames as usize);
    frames.push(FramePlan {
        display_index: 0,
        coding_order_index: 0,
        kind: FrameKind::I,
        refs: vec![],
        hierarchy_level: 0,
    });
    let mut anchor = 0u32;
    while anchor + 1 < num_frames {
        // size of the next GOP: full gop_size inside the material, else the
        // largest power of two that fits
        let remaining = num_frames - 1 - anchor;
        let until_intra = intra_period - (anchor % intra_period);
        let mut g = gop_size.min(until_intra);
        while g > remaining {
            g /= 2;
        }
        let end = anchor + g;
        let kind = if end % intra_period == 0 { FrameKind::I } else { FrameKind::BStar };
        let refs = match kind {
            FrameKind::I => vec![],
            _ => vec![anchor],
        };
        frames.push(FramePlan {
            display_index: end,
            coding_order_index: frames.len() as u32,
            kind,
            refs,
            hierarchy_level: 0,
        });
        bisect(anchor, end, 1, &mut frames);
        anchor = end;
    }
    let p = GopPlan { frames };
    p.validate()?;
    if p.len() != num_frames as usize {
        return Err(Error::Contract(format!(
            "planned {} frames for a {num_frames}-frame sequence",
            p.len()
        )));
    }
    Ok(p)
}

/// Recursive midpoint order: code the midpoint of [lo, hi], then the left
/// half, then the right half.
fn bisect(lo: u32, hi: u32, level: u32, frames: &mut Vec<FramePlan>) {
    if hi - lo < 2 {
        return;
    }
    let mid = (lo + hi) / 2;
    // deepest level frames are the odd display indices (distance 1 to both
    // references); everything shallower is a reference B-frame
    let kind = if hi - lo == 2 { FrameKind::NonRefB } else { FrameKind::RefB };
    frames.push(FramePlan {
        display_index: mid,
        coding_order_index: frames.len() as u32,
        kind,
        refs: vec![lo, hi],
        hierarchy_level: level,
    });
    bisect(lo, mid, level + 1, frames);
    bisect(mid, hi, level + 1, frames);
}

/// The 5-frame training schedule: x0 I, x4 B* (ref x0), x2 reference B
/// (refs x0/x4), and exactly one of {x1, x3} non-reference B, chosen
/// uniformly to balance the B-frame type distribution.
pub fn training_schedule(rng: &mut impl Rng) -> GopPlan {
    let pick_x1 = rng.gen_bool(0.5);
    let chosen = if pick_x1 { 1 } else { 3 };
    let refs = if pick_x1 { vec![0, 2] } else { vec![2, 4] };
    let frames = vec![
        FramePlan {
            display_index: 0,
            coding_order_index: 0,
            kind: FrameKind::I,
            refs: vec![],
            hierarchy_level: 0,
        },
        FramePlan {
            display_index: 4,
            coding_order_index: 1,
            kind: FrameKind::BStar,
            refs: vec![0],
            hierarchy_level: 0,
        },
        FramePlan {
            display_index: 2,
            coding_order_index: 2,
            kind: FrameKind::RefB,
            refs: vec![0, 4],
            hierarchy_level: 1,
        },
        FramePlan {
            display_index: chosen,
            coding_order_index: 3,
            kind: FrameKind::NonRefB,
            refs,
            hierarchy_level: 2,
        },
    ];
    GopPlan { frames }
}

/// CSV rows for the `plan` CLI subcommand:
/// display_index, coding_order, type, ref0, ref1, level.
pub fn plan_csv(p: &GopPlan) -> String {
    let mut out = String::from("display_index,coding_order,type,ref0,ref1,level\n");
    let mut rows: Vec<&FramePlan> = p.coded().iter().collect();
    rows.sort_by_key(|f| f.display_index);
    for f in rows {
        let r0 = f.refs.first().map(|r| r.to_string()).unwrap_or_default();
        let r1 = f.refs.get(1).map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.display_index,
            f.coding_order_index,
            f.kind.name(),
            r0,
            r1,
            f.hierarchy_level
        ));
    }
    out
}
