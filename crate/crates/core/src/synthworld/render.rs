use serde::{Deserialize, Serialize};

use super::{dist, TaskSpec, WorldState};
use crate::trajdata::Frame;

const AGENT_SIGMA: f64 = 0.06;
const OBJECT_RADIUS: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for FrameShape {
    fn default() -> Self {
        FrameShape {
            channels: 3,
            height: 16,
            width: 16,
        }
    }
}

/// Rasterize a state.
///
/// Channel 0 holds a Gaussian blob at the agent, channel 1 the objects as
/// flat disks of intensity `(color_id+1)/num_colors`, channel 2 the goal disk.
/// Cells are sampled at their centers.
pub fn render_frame(task: &TaskSpec, state: &WorldState, shape: FrameShape) -> Frame {
    assert!(shape.channels >= 3, "render_frame needs at least 3 channels");
    let mut frame = Frame::zeros(shape.channels, shape.height, shape.width);
    for y in 0..shape.height {
        for x in 0..shape.width {
            let p = [(x as f64 + 0.5) / shape.width as f64, (y as f64 + 0.5) / shape.height as f64];
            let d2 = (p[0] - state.agent_pos[0]).powi(2) + (p[1] - state.agent_pos[1]).powi(2);
            frame.set(0, y, x, (-d2 / (2.0 * AGENT_SIGMA * AGENT_SIGMA)).exp() as f32);

            let mut obj = 0.0f64;
            for (slot, pos) in task.object_slots.iter().zip(&state.object_pos) {
                if dist(p, *pos) <= OBJECT_RADIUS {
                    obj = obj.max((slot.color_id + 1) as f64 / task.num_colors as f64);
                }
            }
            frame.set(1, y, x, obj as f32);

            if dist(p, task.goal_region.center) <= task.goal_region.radius {
                frame.set(2, y, x, 1.0);
            }
        }
    }
    frame
}
