//! OpenSCENARIO-flavoured XML export of abstracted tracks.
//!
//! The emitted subset is described by `docs/xosc-subset.xsd`. Every action
//! becomes an event: constant-speed and standstill actions as a speed action,
//! all others as a trajectory whose vertices are re-simulated states. The
//! coefficients themselves travel in the parameter declarations.

use std::io;

use quick_xml::events::{BytesDecl, Event};
use quick_xml::Writer;

use crate::error::{Error, Result};
use crate::ingest::Role;
use crate::patterns::ScenarioInstance;
use crate::quantfit::{sample_times, AbstractedTrack, FittedAction, ResimState, Resimulator};
use crate::segmentation::{ActionKind, Channel};

pub const DEFAULT_DT: f64 = 0.1;
pub const TOOL_NAME: &str = "fleetscen";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy)]
pub enum ExportScope<'a> {
    Recording,
    /// Clip every timeline to the instance window.
    Instance(&'a ScenarioInstance),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOptions {
    pub recording_id: String,
    /// Vertex spacing in seconds.
    pub dt: f64,
    /// Written to the header when given; omitted otherwise.
    pub timestamp: Option<String>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { recording_id: String::new(), dt: DEFAULT_DT, timestamp: None }
    }
}

fn num(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v}")
}

/// Name of coefficient `j` of segment `seg` of the `index`-th action of a channel.
pub fn parameter_name(vehicle_id: &str, channel: Channel, index: usize, seg: usize, j: usize) -> String {
    let ch = match channel {
        Channel::Longitudinal => "lon",
        Channel::Lateral => "lat",
    };
    format!("{vehicle_id}.{ch}{index}.seg{seg}.a{j}")
}

pub fn event_name(vehicle_id: &str, channel: Channel, index: usize) -> String {
    format!("{vehicle_id}.{}.{index}", channel.as_str())
}

/// Vertex times of an action clipped to `[lo, hi]`: both ends plus the
/// points of the track's sampling grid strictly between them.
pub fn vertex_times(grid: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut out = vec![lo];
    out.extend(grid.iter().copied().filter(|&g| g > lo && g < hi));
    if hi > lo {
        out.push(hi);
    }
    out
}

struct Clipped<'a> {
    fitted: &'a FittedAction,
    channel: Channel,
    index: usize,
    lo: f64,
    hi: f64,
}

fn clipped_actions(track: &AbstractedTrack, w0: f64, w1: f64) -> Vec<Clipped<'_>> {
    let mut out = Vec::new();
    for channel in [Channel::Longitudinal, Channel::Lateral] {
        for (index, f) in track.fitted_channel(channel).enumerate() {
            let (lo, hi) = (f.action.t_start.max(w0), f.action.t_end().min(w1));
            if hi > lo || (lo == hi && f.action.t_start == f.action.t_end()) {
                out.push(Clipped { fitted: f, channel, index, lo, hi });
            }
        }
    }
    out
}

fn lane_position<W: io::Write>(w: &mut Writer<W>, st: &ResimState) -> io::Result<()> {
    w.create_element("Position").write_inner_content(|w| {
        w.create_element("LanePosition")
            .with_attribute(("laneId", st.lane_id.to_string().as_str()))
            .with_attribute(("s", num(st.s).as_str()))
            .with_attribute(("offset", num(st.t).as_str()))
            .write_empty()?;
        Ok(())
    })?;
    Ok(())
}

fn speed_action<W: io::Write>(w: &mut Writer<W>, speed: f64) -> io::Result<()> {
    w.create_element("PrivateAction").write_inner_content(|w| {
        w.create_element("LongitudinalAction").write_inner_content(|w| {
            w.create_element("SpeedAction").write_inner_content(|w| {
                w.create_element("SpeedActionDynamics")
                    .with_attribute(("dynamicsShape", "step"))
                    .with_attribute(("value", "0"))
                    .with_attribute(("dynamicsDimension", "time"))
                    .write_empty()?;
                w.create_element("SpeedActionTarget").write_inner_content(|w| {
                    w.create_element("AbsoluteTargetSpeed")
                        .with_attribute(("value", num(speed).as_str()))
                        .write_empty()?;
                    Ok(())
                })?;
                Ok(())
            })?;
            Ok(())
        })?;
        Ok(())
    })?;
    Ok(())
}

fn time_trigger<W: io::Write>(w: &mut Writer<W>, element: &str, name: &str, time: f64) -> io::Result<()> {
    w.create_element(element).write_inner_content(|w| {
        w.create_element("ConditionGroup").write_inner_content(|w| {
            w.create_element("Condition")
                .with_attribute(("name", name))
                .with_attribute(("delay", "0"))
                .with_attribute(("conditionEdge", "none"))
                .write_inner_content(|w| {
                    w.create_element("ByValueCondition").write_inner_content(|w| {
                        w.create_element("SimulationTimeCondition")
                            .with_attribute(("value", num(time).as_str()))
                            .with_attribute(("rule", "greaterOrEqual"))
                            .write_empty()?;
                        Ok(())
                    })?;
                    Ok(())
                })?;
            Ok(())
        })?;
        Ok(())
    })?;
    Ok(())
}

fn trajectory<W: io::Write>(w: &mut Writer<W>, name: &str, sim: &Resimulator, times: &[f64]) -> io::Result<()> {
    w.create_element("PrivateAction").write_inner_content(|w| {
        w.create_element("RoutingAction").write_inner_content(|w| {
            w.create_element("FollowTrajectoryAction").write_inner_content(|w| {
                w.create_element("Trajectory")
                    .with_attribute(("name", name))
                    .with_attribute(("closed", "false"))
                    .write_inner_content(|w| {
                        w.create_element("Shape").write_inner_content(|w| {
                            w.create_element("Polyline").write_inner_content(|w| {
                                for &time in times {
                                    let st = sim.state_at(time);
                                    w.create_element("Vertex")
                                        .with_attribute(("time", num(time).as_str()))
                                        .with_attribute(("speed", num(st.speed).as_str()))
                                        .write_inner_content(|w| lane_position(w, &st))?;
                                }
                                Ok(())
                            })?;
                            Ok(())
                        })?;
                        Ok(())
                    })?;
                w.create_element("TimeReference").write_inner_content(|w| {
                    w.create_element("Timing")
                        .with_attribute(("domainAbsoluteRelative", "absolute"))
                        .with_attribute(("scale", "1"))
                        .with_attribute(("offset", "0"))
                        .write_empty()?;
                    Ok(())
                })?;
                w.create_element("TrajectoryFollowingMode")
                    .with_attribute(("followingMode", "position"))
                    .write_empty()?;
                Ok(())
            })?;
            Ok(())
        })?;
        Ok(())
    })?;
    Ok(())
}

fn is_constant_speed(kind: ActionKind) -> bool {
    matches!(kind, ActionKind::KeepVelocity | ActionKind::Standstill)
}

fn write_event<W: io::Write>(
    w: &mut Writer<W>,
    track: &AbstractedTrack,
    sim: &Resimulator,
    grid: &[f64],
    c: &Clipped,
) -> io::Result<()> {
    let a = &c.fitted.action;
    let name = event_name(&track.vehicle_id, c.channel, c.index);
    let mut event = w
        .create_element("Event")
        .with_attribute(("name", name.as_str()))
        .with_attribute(("priority", "parallel"))
        .with_attribute(("channel", c.channel.as_str()))
        .with_attribute(("kind", a.kind.as_str()))
        .with_attribute(("tStart", num(c.lo).as_str()))
        .with_attribute(("tEnd", num(c.hi).as_str()))
        .with_attribute(("laneBefore", a.lane_before.to_string().as_str()))
        .with_attribute(("laneAfter", a.lane_after.to_string().as_str()));
    let crossing = a.crossing_time.map(num);
    if let Some(ct) = &crossing {
        event = event.with_attribute(("crossingTime", ct.as_str()));
    }
    event.write_inner_content(|w| {
        w.create_element("Action").with_attribute(("name", name.as_str())).write_inner_content(|w| {
            if c.channel == Channel::Longitudinal && is_constant_speed(a.kind) {
                let speed =
                    if c.hi > c.lo { (sim.state_at(c.hi).s - sim.state_at(c.lo).s) / (c.hi - c.lo) } else { 0.0 };
                speed_action(w, if a.kind == ActionKind::Standstill { 0.0 } else { speed })
            } else {
                trajectory(w, &name, sim, &vertex_times(grid, c.lo, c.hi))
            }
        })?;
        time_trigger(w, "StartTrigger", "start", c.lo)
    })?;
    Ok(())
}

fn write_parameters<W: io::Write>(w: &mut Writer<W>, tracks: &[(&AbstractedTrack, Vec<Clipped>)]) -> io::Result<()> {
    w.create_element("ParameterDeclarations").write_inner_content(|w| {
        for (track, actions) in tracks {
            for c in actions {
                for (seg, p) in c.fitted.segments.iter().enumerate() {
                    for (j, v) in p.padded().iter().enumerate() {
                        w.create_element("ParameterDeclaration")
                            .with_attribute((
                                "name",
                                parameter_name(&track.vehicle_id, c.channel, c.index, seg, j).as_str(),
                            ))
                            .with_attribute(("parameterType", "double"))
                            .with_attribute(("value", num(*v).as_str()))
                            .write_empty()?;
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok(())
}

/// Scenario document for `tracks`, vehicles in input order.
pub fn export_xosc(tracks: &[AbstractedTrack], scope: ExportScope, opts: &ExportOptions) -> Result<String> {
    if !(opts.dt > 0.0) || !opts.dt.is_finite() {
        return Err(Error::Export(format!("vertex interval must be positive, got {}", opts.dt)));
    }
    let full = tracks
        .iter()
        .map(|t| t.span())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, s| (acc.0.min(s.0), acc.1.max(s.1)));
    let (w0, w1, scope_kind, pattern) = match scope {
        ExportScope::Recording if tracks.is_empty() => (0.0, 0.0, "recording", None),
        ExportScope::Recording => (full.0, full.1, "recording", None),
        ExportScope::Instance(inst) => {
            for v in inst.actors.values().chain(inst.matched_actions.iter().map(|r| &r.vehicle_id)) {
                if !tracks.iter().any(|t| &t.vehicle_id == v) {
                    return Err(Error::UnresolvedAction(format!(
                        "instance `{}` refers to unknown vehicle `{v}`",
                        inst.pattern_id
                    )));
                }
            }
            for r in &inst.matched_actions {
                let t = tracks.iter().find(|t| t.vehicle_id == r.vehicle_id).expect("checked above");
                r.resolve(std::slice::from_ref(&t.timeline))?;
            }
            (inst.t_start, inst.t_end, "instance", Some(inst.pattern_id.as_str()))
        }
    };
    let clipped: Vec<(&AbstractedTrack, Vec<Clipped>)> =
        tracks.iter().map(|t| (t, clipped_actions(t, w0, w1))).collect();

    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    let io = |e: io::Error| Error::Export(e.to_string());
    w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None))).map_err(io)?;
    w.create_element("OpenSCENARIO")
        .write_inner_content(|w| {
            let mut header = w
                .create_element("FileHeader")
                .with_attribute(("revMajor", "1"))
                .with_attribute(("revMinor", "0"))
                .with_attribute(("description", format!("abstracted recording {}", opts.recording_id).as_str()))
                .with_attribute(("author", TOOL_NAME))
                .with_attribute(("toolVersion", TOOL_VERSION))
                .with_attribute(("recordingId", opts.recording_id.as_str()));
            if let Some(ts) = &opts.timestamp {
                header = header.with_attribute(("date", ts.as_str()));
            }
            header.write_empty()?;
            let mut sc = w
                .create_element("Scope")
                .with_attribute(("kind", scope_kind))
                .with_attribute(("start", num(w0).as_str()))
                .with_attribute(("end", num(w1).as_str()))
                .with_attribute(("duration", num(w1 - w0).as_str()));
            if let Some(p) = pattern {
                sc = sc.with_attribute(("patternId", p));
            }
            sc.write_empty()?;
            write_parameters(w, &clipped)?;
            w.create_element("Entities").write_inner_content(|w| {
                for t in tracks {
                    w.create_element("ScenarioObject")
                        .with_attribute(("name", t.vehicle_id.as_str()))
                        .with_attribute(("role", if t.role == Role::Ego { "ego" } else { "other" }))
                        .write_empty()?;
                }
                Ok(())
            })?;
            w.create_element("Storyboard").write_inner_content(|w| {
                w.create_element("Init").write_inner_content(|w| {
                    w.create_element("Actions").write_inner_content(|w| {
                        for (t, actions) in &clipped {
                            let Some(first) = actions.iter().map(|c| c.lo).reduce(f64::min) else { continue };
                            let st = Resimulator::new(t).state_at(first);
                            w.create_element("Private")
                                .with_attribute(("entityRef", t.vehicle_id.as_str()))
                                .write_inner_content(|w| {
                                    w.create_element("PrivateAction").write_inner_content(|w| {
                                        w.create_element("TeleportAction")
                                            .write_inner_content(|w| lane_position(w, &st))?;
                                        Ok(())
                                    })?;
                                    speed_action(w, st.speed)
                                })?;
                        }
                        Ok(())
                    })?;
                    Ok(())
                })?;
                w.create_element("Story").with_attribute(("name", opts.recording_id.as_str())).write_inner_content(
                    |w| {
                        w.create_element("Act").with_attribute(("name", scope_kind)).write_inner_content(|w| {
                            for (t, actions) in &clipped {
                                let sim = Resimulator::new(t);
                                let (t0, t1) = t.span();
                                let grid = sample_times(t0, t1, opts.dt);
                                w.create_element("ManeuverGroup")
                                    .with_attribute(("name", t.vehicle_id.as_str()))
                                    .with_attribute(("maximumExecutionCount", "1"))
                                    .write_inner_content(|w| {
                                        w.create_element("Actors")
                                            .with_attribute(("selectTriggeringEntities", "false"))
                                            .write_inner_content(|w| {
                                                w.create_element("EntityRef")
                                                    .with_attribute(("entityRef", t.vehicle_id.as_str()))
                                                    .write_empty()?;
                                                Ok(())
                                            })?;
                                        w.create_element("Maneuver")
                                            .with_attribute(("name", t.vehicle_id.as_str()))
                                            .write_inner_content(|w| {
                                                for c in actions {
                                                    write_event(w, t, &sim, &grid, c)?;
                                                }
                                                Ok(())
                                            })?;
                                        Ok(())
                                    })?;
                            }
                            Ok(())
                        })?;
                        Ok(())
                    },
                )?;
                time_trigger(w, "StopTrigger", "end", w1)
            })?;
            Ok(())
        })
        .map_err(io)?;
    let mut out = String::from_utf8(w.into_inner()).map_err(|e| Error::Export(e.to_string()))?;
    out.push('\n');
    Ok(out)
}
