//! Phase-machine controller scripts generated from a small set of knobs.
//!
//! The default controller for each task and every scripted rewrite are
//! produced here, so they share one structure:
//! `reach -> descend -> settle -> grasp -> lift`, then for placing tasks
//! `carry -> place -> release -> retract -> done`.

use std::fmt::Write;

use crate::sim::{TaskId, TaskSpec, BIN_CENTER, BIN_HALF, CAN_HALF_HEIGHT, CUBE_HALF};
use crate::vision::{CentroidMode, ColorSpec, TargetSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraspStyle {
    /// Keep descending at `rate` action units per step while closing.
    Pressing { rate: f64 },
    /// Hold position while closing.
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetractStyle {
    /// Slide home at the release height, then rise.
    Sweep,
    /// Rise clear of the stack before moving sideways.
    Ramp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateOptions {
    pub task: TaskId,
    pub title: String,
    pub ema_alpha: f64,
    /// Proportional gain, action units per metre of error.
    pub gain: f64,
    pub centroid: CentroidMode,
    pub flip_y: bool,
    pub cv_extrinsic: bool,
    /// First target is the object to pick; for stack the second is the support cube.
    pub targets: Vec<TargetSpec>,
    /// Hover height of the end effector above the object's top face.
    pub hover: f64,
    pub reach_xy_tol: f64,
    pub reach_z_tol: f64,
    pub descend_tol: f64,
    /// How far below the estimated top face the end effector stops to grasp.
    pub grasp_depth: f64,
    pub grasp: GraspStyle,
    /// Steps spent holding the grasp point before closing.
    pub settle_steps: u32,
    pub close_steps: u32,
    pub retract: RetractStyle,
    /// Reopen and start over when the fingers close on nothing.
    pub grasp_retry: bool,
    /// Latch the placement target when the place phase starts.
    pub freeze_support: bool,
    /// End-effector height above the table while lifting and carrying.
    pub carry_height: f64,
    /// Largest downward action while descending to grasp or place, so smoothing
    /// does not carry the gripper past its target.
    pub approach_speed: f64,
}

fn red_target(name: &str, depth_bias: f64) -> TargetSpec {
    TargetSpec {
        name: name.into(),
        color: ColorSpec::red(),
        depth_bias,
    }
}

fn green_target(name: &str, depth_bias: f64) -> TargetSpec {
    TargetSpec {
        name: name.into(),
        color: ColorSpec::green(),
        depth_bias,
    }
}

impl TemplateOptions {
    /// Baseline knobs for a task, before any rewrite.
    pub fn baseline(task: TaskId) -> Self {
        let base = Self {
            task,
            title: format!("{task} controller v0 (default template)"),
            ema_alpha: 0.4,
            gain: 60.0,
            centroid: CentroidMode::Largest,
            flip_y: false,
            cv_extrinsic: false,
            targets: Vec::new(),
            hover: 0.10,
            reach_xy_tol: 0.02,
            reach_z_tol: 0.01,
            descend_tol: 0.003,
            grasp_depth: 0.0,
            grasp: GraspStyle::Stationary,
            settle_steps: 8,
            close_steps: 8,
            retract: RetractStyle::Ramp,
            grasp_retry: false,
            freeze_support: false,
            carry_height: 0.25,
            approach_speed: 0.5,
        };
        match task {
            TaskId::Lift => Self {
                ema_alpha: 1.0,
                gain: 190.0,
                targets: vec![red_target("cube", 0.0)],
                grasp: GraspStyle::Pressing { rate: 0.3 },
                settle_steps: 0,
                grasp_retry: true,
                ..base
            },
            TaskId::PickPlace => Self {
                targets: vec![TargetSpec {
                    name: "can".into(),
                    color: ColorSpec::silver(),
                    depth_bias: 0.05,
                }],
                centroid: CentroidMode::Mean,
                grasp_retry: true,
                ..base
            },
            TaskId::Stack => Self {
                flip_y: true,
                cv_extrinsic: true,
                targets: vec![red_target("cubeA", 0.0), green_target("cubeB", 0.0)],
                retract: RetractStyle::Sweep,
                ..base
            },
        }
    }

    fn half_height(&self) -> f64 {
        match self.task {
            TaskId::PickPlace => CAN_HALF_HEIGHT,
            TaskId::Lift | TaskId::Stack => CUBE_HALF,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let h = self.half_height();
        let g = num(self.gain);
        let primary = &self.targets[0].name;
        let placing = self.task != TaskId::Lift;

        let _ = writeln!(s, "// {}", self.title);
        let phases = if placing {
            "reach -> descend -> settle -> grasp -> lift -> carry -> place -> release -> retract -> done"
        } else {
            "reach -> descend -> settle -> grasp -> lift"
        };
        let _ = writeln!(s, "// Phases: {phases}\n");

        // config()
        s.push_str("fn config() {\n    #{\n");
        let _ = writeln!(s, "        ema_alpha: {},", num(self.ema_alpha));
        let _ = writeln!(
            s,
            "        centroid: \"{}\",",
            match self.centroid {
                CentroidMode::Largest => "largest",
                CentroidMode::Mean => "mean",
            }
        );
        let _ = writeln!(s, "        flip_y: {},", self.flip_y);
        let _ = writeln!(s, "        cv_extrinsic: {},", self.cv_extrinsic);
        s.push_str("        targets: [\n");
        for t in &self.targets {
            let hue: Vec<String> = t.color.hue.iter().map(|w| format!("[{}, {}]", num(w[0]), num(w[1]))).collect();
            let _ = writeln!(
                s,
                "            #{{ name: \"{}\", hue: [{}], sat_min: {}, sat_max: {}, val_min: {}, val_max: {}, depth_bias: {} }},",
                t.name,
                hue.join(", "),
                num(t.color.sat_min),
                num(t.color.sat_max),
                num(t.color.val_min),
                num(t.color.val_max),
                num(t.depth_bias)
            );
        }
        s.push_str("        ],\n    }\n}\n\n");

        s.push_str(
            "fn reset() {\n    this.phase = \"reach\";\n    this.t = 0;\n    this.goal = ();\n    this.dest = ();\n    this.last_dest = ();\n    this.tries = 0;\n    this.hold = 0;\n}\n\n",
        );
        s.push_str("fn enter(name) {\n    this.phase = name;\n    this.t = 0;\n}\n\n");
        s.push_str("// Proportional step toward `target`; one action unit moves 1 cm.\nfn toward(eef, target, gain) {\n    vec_scale(vec_sub(target, eef), gain)\n}\n\n");
        s.push_str("fn act(d, grip) {\n    [d[0], d[1], d[2], grip]\n}\n\n");

        if placing {
            self.render_destination(&mut s);
        }

        let _ = writeln!(s, "fn get_action(f) {{\n    this.t += 1;\n    let eef = f.eef;\n    let obj = f.{primary};\n");

        // reach
        let _ = write!(
            s,
            r#"    if this.phase == "reach" {{
        if !obj.detected {{
            return [0.0, 0.0, 0.0, -1.0];
        }}
        let est = obj.pos;
        let hover = [est[0], est[1], est[2] + {h} + {hover}];
        let dz = eef[2] - (f.table_z + {rest_top} + {hover});
        // Settled on the hover point, and at the hover height the table geometry predicts.
        if norm_xy(vec_sub(est, eef)) < {xy_tol} && abs(eef[2] - hover[2]) < 0.005 && abs(dz) < {z_tol} {{
            this.goal = est;
            this.enter("descend");
        }} else if this.t > 150 {{
            // Timeout: back off upward and approach again.
            this.t = 0;
            return [0.0, 0.0, 1.0, -1.0];
        }}
        return act(toward(eef, hover, {g}), -1.0);
    }}

"#,
            rest_top = num(2.0 * h),
            hover = num(self.hover),
            h = num(h),
            xy_tol = num(self.reach_xy_tol),
            z_tol = num(self.reach_z_tol),
        );

        // descend
        let next_after_descend = if self.settle_steps > 0 { "settle" } else { "grasp" };
        let _ = write!(
            s,
            r#"    if this.phase == "descend" {{
        let target = [this.goal[0], this.goal[1], this.goal[2] + {top}];
        if norm(vec_sub(target, eef)) < {tol} || this.t > 60 {{
            this.enter("{next}");
        }}
        let d = toward(eef, target, {g});
        d[2] = clamp(d[2], -{ps}, 2.0);
        return act(d, -1.0);
    }}

"#,
            top = num(h - self.grasp_depth),
            tol = num(self.descend_tol),
            next = next_after_descend,
            ps = num(self.approach_speed),
        );

        if self.settle_steps > 0 {
            let _ = write!(
                s,
                r#"    if this.phase == "settle" {{
        // Hold the grasp point until smoothed motion dies out.
        let target = [this.goal[0], this.goal[1], this.goal[2] + {top}];
        if this.t >= {n} {{
            this.enter("grasp");
        }}
        return act(toward(eef, target, {g}), -1.0);
    }}

"#,
                n = self.settle_steps,
                top = num(h - self.grasp_depth),
            );
        }

        let grasp_action = match self.grasp {
            GraspStyle::Stationary => "[0.0, 0.0, 0.0, 1.0]".to_string(),
            GraspStyle::Pressing { rate } => format!("[0.0, 0.0, -{}, 1.0]", num(rate)),
        };
        let grasp_comment = match self.grasp {
            GraspStyle::Stationary => "        // Hold still while the fingers close.\n",
            GraspStyle::Pressing { .. } => "        // Keep pressing down so the fingers close low on the object.\n",
        };
        let _ = write!(
            s,
            r#"    if this.phase == "grasp" {{
        if this.t >= {n} {{
            this.enter("lift");
        }}
{grasp_comment}        return {grasp_action};
    }}

"#,
            n = self.close_steps,
        );

        let empty_branch = if self.grasp_retry {
            r#"        if f.aperture < 0.005 {
            // Closed on nothing: open and start over.
            this.tries += 1;
            this.enter("reach");
            return [0.0, 0.0, 1.0, -1.0];
        }
"#
        } else {
            ""
        };
        let carry = num(self.carry_height);
        let next_after_lift = if placing {
            format!(
                r#"        if eef[2] > f.table_z + {gate} || this.t > 80 {{
            this.enter("carry");
        }}
"#,
                gate = num(self.carry_height - 0.03)
            )
        } else {
            String::new()
        };
        let _ = write!(
            s,
            r#"    if this.phase == "lift" {{
{empty_branch}{next_after_lift}        let target = [this.goal[0], this.goal[1], f.table_z + {carry}];
        return act(toward(eef, target, {g}), 1.0);
    }}

"#
        );

        if placing {
            let freeze = if self.freeze_support { "            this.dest = dest;\n" } else { "" };
            let place_dest = if self.freeze_support {
                "let dest = if this.dest == () { this.destination(f) } else { this.dest };"
            } else {
                "let dest = this.destination(f);"
            };
            let ps = num(self.approach_speed);
            let _ = write!(
                s,
                r#"    if this.phase == "carry" {{
        let dest = this.destination(f);
        let above = [dest[0], dest[1], f.table_z + {carry}];
        if (norm_xy(vec_sub(above, eef)) < 0.006 && this.t > 5) || this.t > 150 {{
{freeze}            this.enter("place");
        }}
        return act(toward(eef, above, {g}), 1.0);
    }}

    if this.phase == "place" {{
        {place_dest}
        // Open only once the gripper has come to rest at the release height.
        if abs(eef[2] - dest[2]) < 0.003 {{
            this.hold += 1;
        }} else {{
            this.hold = 0;
        }}
        if this.hold >= 3 || this.t > 100 {{
            this.enter("release");
        }}
        let d = toward(eef, dest, {g});
        d[2] = clamp(d[2], -{ps}, 2.0);
        return act(d, 1.0);
    }}

    if this.phase == "release" {{
        if this.t >= 6 {{
            this.enter("retract");
        }}
        return [0.0, 0.0, 0.0, -1.0];
    }}

"#
            );
            let retract = match self.retract {
                RetractStyle::Sweep => format!(
                    r#"    if this.phase == "retract" {{
        let home = [0.0, 0.0, f.table_z + 0.25];
        if norm(vec_sub(home, eef)) < 0.01 {{
            this.enter("done");
        }}
        // Slide home first, then rise.
        if norm_xy(vec_sub(home, eef)) > 0.01 {{
            return act(toward(eef, [home[0], home[1], eef[2]], {g}), -1.0);
        }}
        return act(toward(eef, home, {g}), -1.0);
    }}

"#
                ),
                RetractStyle::Ramp => format!(
                    r#"    if this.phase == "retract" {{
        let home = [0.0, 0.0, f.table_z + 0.25];
        if norm(vec_sub(home, eef)) < 0.01 {{
            this.enter("done");
        }}
        // Rise clear of the stack before moving sideways.
        if this.t <= 12 {{
            return [0.0, 0.0, 1.0, -1.0];
        }}
        return act(toward(eef, home, {g}), -1.0);
    }}

"#
                ),
            };
            s.push_str(&retract);
        }

        s.push_str("    [0.0, 0.0, 0.0, -1.0]\n}\n");
        s
    }

    fn render_destination(&self, s: &mut String) {
        let h = self.half_height();
        // End-effector height above the object centre once grasped.
        let grip_above_center = h - self.grasp_depth;
        match self.task {
            TaskId::PickPlace => {
                let floor = crate::sim::TABLE_TOP_Z + 2.0 * BIN_HALF[2] - crate::sim::TABLE_TOP_Z;
                let _ = write!(
                    s,
                    r#"// Release point above the bin centre, can bottom 1 cm over the floor.
fn destination(f) {{
    [{x}, {y}, f.table_z + {z}]
}}

"#,
                    x = num(BIN_CENTER[0]),
                    y = num(BIN_CENTER[1]),
                    z = num(floor + 0.01 + 2.0 * h + grip_above_center - h),
                );
            }
            TaskId::Stack => {
                let support = &self.targets[1].name;
                let _ = write!(
                    s,
                    r#"// End-effector pose that rests cubeA on the estimated top of cubeB.
fn destination(f) {{
    if f.{support}.detected {{
        let b = f.{support}.pos;
        this.last_dest = [b[0], b[1], b[2] + {z}];
    }}
    if this.last_dest == () {{
        return [f.eef[0], f.eef[1], f.eef[2]];
    }}
    this.last_dest
}}

"#,
                    z = num(2.0 * h + grip_above_center),
                );
            }
            TaskId::Lift => {}
        }
    }
}

/// Float literal that always parses as a script float.
fn num(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    let s = format!("{r}");
    if s.contains('.') || s.contains('e') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Baseline controller script for a task.
pub fn default_controller(task: &TaskSpec) -> String {
    TemplateOptions::baseline(task.task).render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{canned_features, Provenance, Sandbox};

    #[test]
    fn number_literals() {
        assert_eq!(num(60.0), "60.0");
        assert_eq!(num(0.025), "0.025");
        assert_eq!(num(-0.3), "-0.3");
    }

    #[test]
    fn defaults_validate() {
        let sandbox = Sandbox::new();
        for task in TaskId::ALL {
            let src = default_controller(&TaskSpec::new(task));
            let names: Vec<&str> = match task {
                TaskId::Lift => vec!["cube"],
                TaskId::PickPlace => vec!["can"],
                TaskId::Stack => vec!["cubeA", "cubeB"],
            };
            sandbox
                .validate(src.as_bytes(), &canned_features(&names), 0, Provenance::Initial)
                .unwrap_or_else(|e| panic!("{task}: {e}\n{src}"));
        }
    }
}
