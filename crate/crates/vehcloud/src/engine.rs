//! The simulation engine: one deterministic single-threaded run of a
//! scenario under one protocol.
//!
//! Frames (beacons and data) go through a carrier-sense + backoff MAC;
//! receiver outcomes are resolved against overlapping transmissions and
//! the obstacle map. Messages travel either the cloud pipeline
//! (vehicle -> bus gateway -> cloud -> selected gateways -> broadcast) or
//! multi-hop relay chains, per the protocol under test.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::channel::draw_backoff;
use crate::config::ScenarioConfig;
use crate::error::{Result, SimError};
use crate::metrics::{
    self, ChannelTallies, DeliveryOutcome, MetricsRecord, RunSummary,
};
use crate::mobility::{self, Role, Scenario, Trace};
use crate::obstacle::{classify_link, LinkModel, Point, RegionClass};
use crate::protocols::{
    select_gateways, select_mode, DisseminationMode, GatewayInfo, NeighborView, ProtocolKind,
};
use crate::simcore::{substream, EventQueue};

/// Abort a frame after this many carrier-sense deferrals.
const MAX_DEFERS: u32 = 16;

#[derive(Debug, Clone, Copy)]
enum Ev {
    BeaconTick { node: u32 },
    TxStart { frame: u32 },
    TxEnd { frame: u32 },
    RxResolve { frame: u32 },
    CloudLeg { msg: u32, leg: CloudLegKind },
    RetryTimer { msg: u32, holder: u32 },
    MessageOrigination { node: u32 },
    SimEnd,
}

#[derive(Debug, Clone, Copy)]
enum CloudLegKind {
    /// Uplink + (first-use deploy) + processing done; run gateway
    /// selection.
    Process,
    /// Downlink to one selected gateway complete; gateway broadcasts.
    Downlink { gateway: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FrameKind {
    Beacon,
    /// Multi-hop broadcast from a holder; `relay` is the designated next
    /// holder, `hop` the chain depth so far.
    Forward { msg: u32, relay: Option<u32>, hop: u32 },
    /// Unicast upload of a message to a bus gateway.
    Upload { msg: u32, gateway: u32 },
    /// Gateway's DSRC broadcast after a cloud downlink.
    GatewayBroadcast { msg: u32 },
}

#[derive(Debug, Clone)]
struct Frame {
    sender: u32,
    kind: FrameKind,
    start: f64,
    end: f64,
    sender_pos: Point,
    cw: u32,
    defers: u32,
    retries_left: u32,
    released: bool,
}

struct MessageState {
    source: u32,
    created_at: f64,
    targets: Vec<u32>,
    covered: Vec<bool>,
    delivered_at: Vec<Option<f64>>,
    delivered_hops: Vec<Option<u32>>,
    delivered_mode: Vec<Option<DisseminationMode>>,
    n_covered: usize,
    initial_mode: DisseminationMode,
    current_mode: DisseminationMode,
    hop_trace: Vec<(u32, f64)>,
    /// Nodes that broadcast during the current dissemination attempt.
    attempt_forwarded: HashSet<u32>,
    /// Relay candidates already tried (and failed) in this attempt.
    attempt_tried: HashSet<u32>,
    in_cloud: bool,
    retries: u32,
    escalations: u32,
    done: bool,
}

impl MessageState {
    fn uncovered(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.covered[*i])
            .map(|(i, &t)| (i, t))
    }
}

#[derive(Debug, Clone)]
struct NodeMeta {
    id: String,
    role: Role,
}

struct SpatialGrid {
    cell: f64,
    built_at: f64,
    valid: bool,
    map: HashMap<(i32, i32), Vec<u32>>,
}

impl SpatialGrid {
    fn new(cell: f64) -> Self {
        SpatialGrid {
            cell,
            built_at: -1.0,
            valid: false,
            map: HashMap::new(),
        }
    }

    fn key(&self, p: Point) -> (i32, i32) {
        (
            (p.x / self.cell).floor() as i32,
            (p.y / self.cell).floor() as i32,
        )
    }

    fn rebuild(&mut self, trace: &Trace, t: f64) {
        self.map.values_mut().for_each(Vec::clear);
        for (i, node) in trace.nodes.iter().enumerate() {
            if let Some(p) = node.try_position_at(t) {
                self.map.entry(self.key(p)).or_default().push(i as u32);
            }
        }
        self.built_at = t;
        self.valid = true;
    }

    /// Candidate nodes within `radius` of `p` (superset; caller filters by
    /// exact positions). `slack` covers movement since the last rebuild.
    fn query(&self, p: Point, radius: f64, out: &mut Vec<u32>) {
        out.clear();
        let r = radius + 10.0;
        let (kx0, ky0) = self.key(Point::new(p.x - r, p.y - r));
        let (kx1, ky1) = self.key(Point::new(p.x + r, p.y + r));
        for kx in kx0..=kx1 {
            for ky in ky0..=ky1 {
                if let Some(v) = self.map.get(&(kx, ky)) {
                    out.extend_from_slice(v);
                }
            }
        }
    }
}

/// Per-run outputs.
pub struct RunResult {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    pub tallies: ChannelTallies,
    pub hop_traces: Vec<HopTrace>,
    pub events_processed: u64,
}

/// Dump of one message's path, emitted when tracing is on.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HopTrace {
    pub message_id: u64,
    pub source: String,
    pub created_at: f64,
    pub initial_mode: DisseminationMode,
    pub final_mode: DisseminationMode,
    pub escalations: u32,
    pub hops: Vec<(String, f64)>,
    pub delivered: usize,
    pub intended: usize,
}

#[derive(Default)]
pub struct RunOptions<'w> {
    pub event_log: Option<&'w mut dyn Write>,
    pub collect_hop_traces: bool,
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunResult> {
    run_with_options(cfg, RunOptions::default())
}

pub fn run_with_options(cfg: &ScenarioConfig, opts: RunOptions<'_>) -> Result<RunResult> {
    cfg.validate()?;
    let scenario = build_scenario(cfg)?;
    let mut engine = Engine::new(cfg, scenario, opts)?;
    engine.run()
}

/// Materialize the scenario from the generator or an external trace file.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    if let Some(grid) = &cfg.scenario.grid {
        return mobility::generate_grid_scenario(grid, cfg.run.seed, cfg.run.duration_s);
    }
    let tr = cfg.scenario.trace.as_ref().expect("validated");
    let mut samples = mobility::load_trace(&tr.path)?;
    let duration = cfg.run.duration_s;
    for (i, rsu) in tr.rsus.iter().enumerate() {
        for &t in &[0.0, duration] {
            samples.push(mobility::TraceSample {
                time: t,
                vehicle_id: format!("rsu{i}"),
                pos: Point::new(rsu[0], rsu[1]),
                speed: 0.0,
            });
        }
    }
    let bus_ids: HashSet<&str> = tr.bus_ids.iter().map(String::as_str).collect();
    let trace = Trace::from_samples(samples, |id| {
        if bus_ids.contains(id) {
            Role::Bus
        } else {
            mobility::role_of_id(id)
        }
    })?;
    let obstacles = tr
        .obstacles
        .iter()
        .map(|o| crate::obstacle::Obstacle::from_bounds(o[0], o[1], o[2], o[3]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        trace,
        obstacles,
        extent_m: None,
    })
}

struct Engine<'a, 'w> {
    cfg: &'a ScenarioConfig,
    kind: ProtocolKind,
    scenario: Scenario,
    nodes: Vec<NodeMeta>,
    cars: Vec<u32>,
    buses: Vec<u32>,
    queue: EventQueue<Ev>,
    frames: Vec<Frame>,
    free_frames: Vec<u32>,
    active: Vec<u32>,
    recent: VecDeque<u32>,
    msgs: Vec<MessageState>,
    rng_mac: ChaCha8Rng,
    rng_workload: ChaCha8Rng,
    rng_protocol: ChaCha8Rng,
    rng_shadow: ChaCha8Rng,
    grid: SpatialGrid,
    tallies: ChannelTallies,
    cloud_deployed: bool,
    duration: f64,
    lm: LinkModel,
    bus_lm: LinkModel,
    tx_dur: f64,
    beacon_dur: f64,
    mode_counts: [u64; 3],
    event_log: Option<&'w mut dyn Write>,
    collect_traces: bool,
    events_processed: u64,
    scratch: Vec<u32>,
}

impl<'a, 'w> Engine<'a, 'w> {
    fn new(cfg: &'a ScenarioConfig, scenario: Scenario, opts: RunOptions<'w>) -> Result<Self> {
        let nodes: Vec<NodeMeta> = scenario
            .trace
            .nodes
            .iter()
            .map(|n| NodeMeta {
                id: n.id.clone(),
                role: n.role,
            })
            .collect();
        let cars = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == Role::Car)
            .map(|(i, _)| i as u32)
            .collect();
        let buses = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == Role::Bus)
            .map(|(i, _)| i as u32)
            .collect();
        let lm = LinkModel::new(cfg.link.t_base_m, cfg.link.clearance_delta_m)?;
        let bus_lm = LinkModel::new(cfg.link.bus_t_base_m, cfg.link.clearance_delta_m)?;
        let seed = cfg.run.seed;
        let cell = cfg.link.t_base_m.max(cfg.link.bus_t_base_m);
        Ok(Engine {
            kind: cfg.protocol_kind(),
            nodes,
            cars,
            buses,
            queue: EventQueue::new(),
            frames: Vec::new(),
            free_frames: Vec::new(),
            active: Vec::new(),
            recent: VecDeque::new(),
            msgs: Vec::new(),
            rng_mac: substream(seed, "mac-backoff"),
            rng_workload: substream(seed, "workload"),
            rng_protocol: substream(seed, "protocol"),
            rng_shadow: substream(seed, "shadow-loss"),
            grid: SpatialGrid::new(cell),
            tallies: ChannelTallies::default(),
            cloud_deployed: false,
            duration: cfg.run.duration_s,
            lm,
            bus_lm,
            tx_dur: cfg.mac.tx_duration(),
            beacon_dur: cfg.mac.beacon_duration(),
            mode_counts: [0; 3],
            event_log: opts.event_log,
            collect_traces: opts.collect_hop_traces,
            events_processed: 0,
            scratch: Vec::new(),
            scenario,
            cfg,
        })
    }

    fn now(&self) -> f64 {
        self.queue.now()
    }

    fn pos(&self, node: u32, t: f64) -> Option<Point> {
        self.scenario.trace.nodes[node as usize].try_position_at(t)
    }

    fn role(&self, node: u32) -> Role {
        self.nodes[node as usize].role
    }

    /// Link classification with the elevated-bus-antenna rule: a link with
    /// a bus endpoint uses the bus range and (by default) ignores
    /// obstacles.
    fn link_class(&self, a: u32, pa: Point, b: u32, pb: Point) -> RegionClass {
        if pa == pb {
            return RegionClass::Clear;
        }
        let bus = self.role(a) == Role::Bus || self.role(b) == Role::Bus;
        let lm = if bus { &self.bus_lm } else { &self.lm };
        let obstacles: &[crate::obstacle::Obstacle] =
            if bus && self.cfg.link.bus_links_clear_obstacles {
                &[]
            } else {
                &self.scenario.obstacles
            };
        classify_link(pa, pb, obstacles, lm).unwrap_or(RegionClass::OutOfRange)
    }

    fn refresh_grid(&mut self) {
        let t = self.now();
        if !self.grid.valid || t - self.grid.built_at > 0.1 {
            self.grid.rebuild(&self.scenario.trace, t);
        }
    }

    /// Nodes within `radius` of `p` at the current time, sorted by index.
    fn nodes_near(&mut self, p: Point, radius: f64) -> Vec<(u32, Point)> {
        self.refresh_grid();
        let t = self.now();
        let mut cand = std::mem::take(&mut self.scratch);
        self.grid.query(p, radius, &mut cand);
        let mut out = Vec::with_capacity(cand.len());
        for &n in &cand {
            if let Some(q) = self.pos(n, t) {
                if p.dist_sq(q) <= radius * radius {
                    out.push((n, q));
                }
            }
        }
        self.scratch = cand;
        out
    }

    // ------------------------------------------------------------------
    // MAC
    // ------------------------------------------------------------------

    fn alloc_frame(&mut self, f: Frame) -> u32 {
        if let Some(i) = self.free_frames.pop() {
            self.frames[i as usize] = f;
            i
        } else {
            self.frames.push(f);
            (self.frames.len() - 1) as u32
        }
    }

    fn mac_send(&mut self, sender: u32, kind: FrameKind, retries: u32) -> Result<()> {
        let t = self.now();
        let ideal = self.cfg.run.ideal_mac;
        let start = if ideal {
            t
        } else {
            let slots = draw_backoff(&mut self.rng_mac, self.cfg.mac.cw_min);
            t + f64::from(slots) * self.cfg.mac.slot_time_s
        };
        let frame = self.alloc_frame(Frame {
            sender,
            kind,
            start,
            end: 0.0,
            sender_pos: Point::new(0.0, 0.0),
            cw: self.cfg.mac.cw_min,
            defers: 0,
            retries_left: retries,
            released: false,
        });
        self.queue.schedule(start, Ev::TxStart { frame })?;
        Ok(())
    }

    fn on_tx_start(&mut self, frame: u32) -> Result<()> {
        let t = self.now();
        let sender = self.frames[frame as usize].sender;
        let Some(sender_pos) = self.pos(sender, t) else {
            // Sender left the trace span; abort silently.
            self.release_frame(frame);
            return Ok(());
        };
        if !self.cfg.run.ideal_mac {
            // Carrier sense: defer while any audible transmission is on air.
            let mut busy_until: f64 = f64::NEG_INFINITY;
            for &a in &self.active {
                let af = &self.frames[a as usize];
                if af.sender == sender {
                    busy_until = busy_until.max(af.end);
                    continue;
                }
                if self.link_class(af.sender, af.sender_pos, sender, sender_pos)
                    == RegionClass::Clear
                {
                    busy_until = busy_until.max(af.end);
                }
            }
            if busy_until > t {
                let f = &mut self.frames[frame as usize];
                f.defers += 1;
                if f.defers > MAX_DEFERS {
                    let kind = f.kind;
                    self.release_frame(frame);
                    return self.on_frame_failed(kind);
                }
                f.cw = (f.cw * 2 + 1).min(self.cfg.mac.cw_max);
                let cw = f.cw;
                let slots = draw_backoff(&mut self.rng_mac, cw);
                let retry_at = busy_until + f64::from(slots) * self.cfg.mac.slot_time_s;
                self.frames[frame as usize].start = retry_at;
                self.queue.schedule(retry_at, Ev::TxStart { frame })?;
                return Ok(());
            }
        }
        let dur = if self.frames[frame as usize].kind == FrameKind::Beacon {
            self.beacon_dur
        } else {
            self.tx_dur
        };
        let end = t + dur;
        {
            let f = &mut self.frames[frame as usize];
            f.start = t;
            f.end = end;
            f.sender_pos = sender_pos;
        }
        self.active.push(frame);
        self.queue.schedule(end, Ev::TxEnd { frame })?;
        Ok(())
    }

    fn on_tx_end(&mut self, frame: u32) -> Result<()> {
        self.active.retain(|&f| f != frame);
        self.recent.push_back(frame);
        self.prune_recent();
        if self.frames[frame as usize].kind != FrameKind::Beacon {
            self.queue.schedule(self.now(), Ev::RxResolve { frame })?;
        } else {
            // Beacons only load the channel; no receiver-side effects.
        }
        Ok(())
    }

    fn prune_recent(&mut self) {
        let horizon = self.now() - 2.0 * self.tx_dur;
        while let Some(&front) = self.recent.front() {
            if self.frames[front as usize].end <= horizon {
                self.recent.pop_front();
                self.release_frame(front);
            } else {
                break;
            }
        }
    }

    fn release_frame(&mut self, frame: u32) {
        let f = &mut self.frames[frame as usize];
        if !f.released {
            f.released = true;
            self.free_frames.push(frame);
        }
    }

    /// Transmissions overlapping `frame` in time (collision candidates).
    fn overlapping_frames(&self, frame: u32) -> Vec<u32> {
        let a = &self.frames[frame as usize];
        self.active
            .iter()
            .chain(self.recent.iter())
            .copied()
            .filter(|&other| {
                if other == frame {
                    return false;
                }
                let o = &self.frames[other as usize];
                !o.released && o.start < a.end && a.start < o.end
            })
            .collect()
    }

    fn collided_at(&self, interferers: &[u32], receiver: u32, rx_pos: Point) -> bool {
        interferers.iter().any(|&other| {
            let o = &self.frames[other as usize];
            o.sender != receiver
                && self.link_class(o.sender, o.sender_pos, receiver, rx_pos) == RegionClass::Clear
        })
    }

    fn on_rx_resolve(&mut self, frame: u32) -> Result<()> {
        let f = self.frames[frame as usize].clone();
        let t = self.now();
        // Non-bus senders reach ordinary nodes within t_base; only buses
        // (elevated antennas) are audible farther out.
        let receivers: Vec<(u32, Point)> = if self.role(f.sender) == Role::Bus {
            self.nodes_near(f.sender_pos, self.bus_lm.t_base)
        } else {
            let mut r = self.nodes_near(f.sender_pos, self.lm.t_base);
            if self.bus_lm.t_base > self.lm.t_base {
                for b in self.buses.clone() {
                    if r.iter().any(|&(n, _)| n == b) {
                        continue;
                    }
                    if let Some(p) = self.pos(b, t) {
                        if f.sender_pos.dist(p) <= self.bus_lm.t_base {
                            r.push((b, p));
                        }
                    }
                }
            }
            r
        };
        let interferers = if self.cfg.run.ideal_mac {
            Vec::new()
        } else {
            self.overlapping_frames(frame)
        };
        let shadow_loss = self.cfg.link.shadow_loss_prob;
        let mut delivered_to: Vec<u32> = Vec::new();
        let mut relay_ok = false;
        for (r, rx_pos) in receivers {
            if r == f.sender {
                continue;
            }
            match self.link_class(f.sender, f.sender_pos, r, rx_pos) {
                RegionClass::OutOfRange => continue,
                RegionClass::Shadowed => {
                    if shadow_loss >= 1.0 || self.rng_shadow.gen::<f64>() < shadow_loss {
                        self.tallies.shadow_blocked += 1;
                        continue;
                    }
                    // Leaked through the shadow: fall through to the
                    // collision check.
                }
                RegionClass::Clear => {}
            }
            if !self.cfg.run.ideal_mac && self.collided_at(&interferers, r, rx_pos) {
                self.tallies.collided += 1;
                continue;
            }
            self.tallies.delivered += 1;
            delivered_to.push(r);
            if let FrameKind::Forward { relay: Some(rel), .. } = f.kind {
                if rel == r {
                    relay_ok = true;
                }
            }
        }
        match f.kind {
            FrameKind::Beacon => {}
            FrameKind::Forward { msg, relay, hop } => {
                self.deliver_to_targets(msg, &delivered_to, hop + 1)?;
                self.after_forward(msg, frame, relay, hop, relay_ok)?;
            }
            FrameKind::Upload { msg, gateway } => {
                self.deliver_to_targets(msg, &delivered_to, 1)?;
                let got = delivered_to.contains(&gateway);
                self.after_upload(msg, frame, gateway, got)?;
            }
            FrameKind::GatewayBroadcast { msg } => {
                self.deliver_to_targets(msg, &delivered_to, 1)?;
            }
        }
        Ok(())
    }

    fn on_frame_failed(&mut self, kind: FrameKind) -> Result<()> {
        match kind {
            FrameKind::Beacon => Ok(()),
            FrameKind::Forward { msg, relay, hop } => {
                self.after_forward(msg, u32::MAX, relay, hop, false)
            }
            FrameKind::Upload { msg, gateway } => self.after_upload(msg, u32::MAX, gateway, false),
            FrameKind::GatewayBroadcast { .. } => Ok(()),
        }
    }

    // ------------------------------------------------------------------
    // Message lifecycle
    // ------------------------------------------------------------------

    fn deliver_to_targets(&mut self, msg: u32, receivers: &[u32], hops: u32) -> Result<()> {
        let t = self.now();
        let m = &mut self.msgs[msg as usize];
        if m.done {
            return Ok(());
        }
        let mode = m.current_mode;
        for &r in receivers {
            if let Ok(i) = m.targets.binary_search(&r) {
                if !m.covered[i] {
                    m.covered[i] = true;
                    m.n_covered += 1;
                    m.delivered_at[i] = Some(t);
                    m.delivered_hops[i] = Some(hops);
                    m.delivered_mode[i] = Some(mode);
                }
            }
        }
        if m.n_covered == m.targets.len() {
            m.done = true;
        }
        Ok(())
    }

    fn originate(&mut self, node: u32) -> Result<()> {
        let t = self.now();
        // Schedule this car's next origination first.
        let rate = self.cfg.workload.msgs_per_sec_per_10_vehicles / 10.0;
        if rate > 0.0 {
            let gap = -(1.0 - self.rng_workload.gen::<f64>()).ln() / rate;
            let next = t + gap;
            if next < self.duration {
                self.queue.schedule(next, Ev::MessageOrigination { node })?;
            }
        }
        let Some(src_pos) = self.pos(node, t) else {
            return Ok(());
        };
        let radius = self.cfg.scenario.target_radius_m;
        let mut targets: Vec<u32> = self
            .nodes_near(src_pos, radius)
            .into_iter()
            .filter(|&(n, _)| n != node && self.role(n) == Role::Car)
            .map(|(n, _)| n)
            .collect();
        targets.sort_unstable();
        if targets.is_empty() {
            return Ok(());
        }
        let mode = self.choose_initial_mode(node, src_pos);
        let n = targets.len();
        let msg = self.msgs.len() as u32;
        self.msgs.push(MessageState {
            source: node,
            created_at: t,
            covered: vec![false; n],
            delivered_at: vec![None; n],
            delivered_hops: vec![None; n],
            delivered_mode: vec![None; n],
            targets,
            n_covered: 0,
            initial_mode: mode,
            current_mode: mode,
            hop_trace: vec![(node, t)],
            attempt_forwarded: HashSet::new(),
            attempt_tried: HashSet::new(),
            in_cloud: false,
            retries: 0,
            escalations: 0,
            done: false,
        });
        self.mode_counts[mode_index(mode)] += 1;
        match mode {
            DisseminationMode::CloudGateway => self.cloud_init(msg, node)?,
            _ => self.multihop_start(msg, node, 0)?,
        }
        Ok(())
    }

    fn choose_initial_mode(&mut self, node: u32, src_pos: Point) -> DisseminationMode {
        match self.kind {
            ProtocolKind::CmdsLike => DisseminationMode::CloudGateway,
            ProtocolKind::ClbpLike => self.multihop_flavor(node, src_pos),
            ProtocolKind::CloudVanetLike => {
                if self.rng_protocol.gen::<f64>() < self.cfg.protocol.split {
                    DisseminationMode::CloudGateway
                } else {
                    self.multihop_flavor(node, src_pos)
                }
            }
            ProtocolKind::HybridVehcloud => self.run_select_mode(node, src_pos),
        }
    }

    /// V2V vs V2I for protocols that never use the cloud.
    fn multihop_flavor(&mut self, node: u32, src_pos: Point) -> DisseminationMode {
        match self.run_select_mode(node, src_pos) {
            DisseminationMode::MultiHopV2I => DisseminationMode::MultiHopV2I,
            _ => DisseminationMode::MultiHopV2V,
        }
    }

    fn run_select_mode(&mut self, node: u32, src_pos: Point) -> DisseminationMode {
        let radius = self.lm.t_base.max(self.bus_lm.t_base);
        let neighbors: Vec<NeighborView> = self
            .nodes_near(src_pos, radius)
            .into_iter()
            .filter(|&(n, _)| n != node)
            .map(|(n, p)| NeighborView {
                pos: p,
                role: self.role(n),
            })
            .collect();
        select_mode(
            src_pos,
            &neighbors,
            &self.scenario.obstacles,
            &self.lm,
            self.cfg.link.bus_links_clear_obstacles,
            self.cfg.protocol.shadow_threshold,
        )
    }

    // ---------------- multi-hop path ----------------

    fn multihop_start(&mut self, msg: u32, holder: u32, hop: u32) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        let t = self.now();
        let Some(holder_pos) = self.pos(holder, t) else {
            return self.stuck(msg, holder, hop);
        };
        // Farthest uncovered target from the holder.
        let mut farthest: Option<(u32, Point, f64)> = None;
        let uncovered: Vec<u32> = self.msgs[msg as usize].uncovered().map(|(_, n)| n).collect();
        for n in &uncovered {
            if let Some(p) = self.pos(*n, t) {
                let d = holder_pos.dist(p);
                if farthest.map_or(true, |(_, _, bd)| d > bd) {
                    farthest = Some((*n, p, d));
                }
            }
        }
        let Some((_, far_pos, far_dist)) = farthest else {
            return Ok(());
        };
        // Relay needed only when some uncovered target is beyond clear
        // direct reach.
        let relay = if far_dist <= self.lm.t_base && self.all_uncovered_reachable(msg, holder, holder_pos) {
            None
        } else {
            self.pick_relay(msg, holder, holder_pos, far_pos)
        };
        if relay.is_none() && hop == 0 && far_dist > self.lm.t_base {
            // Nothing to gain from a broadcast no relay will extend; still
            // broadcast once to cover in-range targets, then the resolve
            // step will escalate or retry.
        }
        self.msgs[msg as usize].attempt_forwarded.insert(holder);
        self.msgs[msg as usize].hop_trace.push((holder, t));
        let retries = self.cfg.protocol.retry_count;
        self.mac_send(holder, FrameKind::Forward { msg, relay, hop }, retries)
    }

    fn all_uncovered_reachable(&mut self, msg: u32, holder: u32, holder_pos: Point) -> bool {
        let t = self.now();
        let uncovered: Vec<u32> = self.msgs[msg as usize].uncovered().map(|(_, n)| n).collect();
        uncovered.iter().all(|&n| {
            self.pos(n, t)
                .map(|p| self.link_class(holder, holder_pos, n, p) == RegionClass::Clear)
                .unwrap_or(false)
        })
    }

    fn pick_relay(&mut self, msg: u32, holder: u32, holder_pos: Point, far_pos: Point) -> Option<u32> {
        let v2i = matches!(
            self.msgs[msg as usize].current_mode,
            DisseminationMode::MultiHopV2I
        );
        // Gateway-aware protocols can hand a chain to an elevated bus;
        // the pure-multihop baseline only relays through ordinary
        // vehicles (and RSUs in V2I mode).
        let bus_relays = matches!(
            self.kind,
            ProtocolKind::HybridVehcloud | ProtocolKind::CloudVanetLike
        );
        let mut neighbors = self.nodes_near(holder_pos, self.lm.t_base);
        if bus_relays && self.bus_lm.t_base > self.lm.t_base {
            let t = self.now();
            for b in self.buses.clone() {
                if neighbors.iter().any(|&(n, _)| n == b) {
                    continue;
                }
                if let Some(p) = self.pos(b, t) {
                    if holder_pos.dist(p) <= self.bus_lm.t_base {
                        neighbors.push((b, p));
                    }
                }
            }
        }
        let own_dist = holder_pos.dist(far_pos);
        let mut best: Option<(f64, u32)> = None;
        for (n, p) in neighbors {
            if n == holder {
                continue;
            }
            let role = self.role(n);
            let eligible = match role {
                Role::Car => true,
                Role::Bus => bus_relays,
                Role::Rsu => v2i,
            };
            if !eligible {
                continue;
            }
            let m = &self.msgs[msg as usize];
            if m.attempt_forwarded.contains(&n) || m.attempt_tried.contains(&n) {
                continue;
            }
            if self.link_class(holder, holder_pos, n, p) != RegionClass::Clear {
                continue;
            }
            let d = p.dist(far_pos);
            if d + 1.0 >= own_dist {
                continue; // no forward progress
            }
            if best.map_or(true, |(bd, bn)| d < bd || (d == bd && n < bn)) {
                best = Some((d, n));
            }
        }
        best.map(|(_, n)| n)
    }

    fn after_forward(
        &mut self,
        msg: u32,
        frame: u32,
        relay: Option<u32>,
        hop: u32,
        relay_ok: bool,
    ) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        let holder = if frame == u32::MAX {
            self.msgs[msg as usize].hop_trace.last().map(|&(n, _)| n).unwrap_or(0)
        } else {
            self.frames[frame as usize].sender
        };
        match relay {
            Some(rel) if relay_ok => {
                if hop + 1 >= self.cfg.protocol.ttl_hops {
                    return self.stuck(msg, rel, hop + 1);
                }
                self.multihop_start(msg, rel, hop + 1)
            }
            Some(rel) => {
                // Designated relay missed the frame.
                let retries_left = if frame == u32::MAX {
                    0
                } else {
                    self.frames[frame as usize].retries_left
                };
                if retries_left > 0 {
                    let m = &mut self.msgs[msg as usize];
                    m.attempt_tried.insert(rel);
                    // Re-pick (possibly a different relay) and retransmit.
                    let Some(holder_pos) = self.pos(holder, self.now()) else {
                        return self.stuck(msg, holder, hop);
                    };
                    let far = self.farthest_uncovered(msg, holder_pos);
                    let new_relay = far.and_then(|fp| self.pick_relay(msg, holder, holder_pos, fp));
                    self.mac_send(
                        holder,
                        FrameKind::Forward {
                            msg,
                            relay: new_relay,
                            hop,
                        },
                        retries_left - 1,
                    )
                } else {
                    self.stuck(msg, holder, hop)
                }
            }
            None => {
                // No relay was designated; if targets remain we are stuck.
                if self.msgs[msg as usize].done {
                    Ok(())
                } else {
                    self.stuck(msg, holder, hop)
                }
            }
        }
    }

    fn farthest_uncovered(&mut self, msg: u32, from: Point) -> Option<Point> {
        let t = self.now();
        let uncovered: Vec<u32> = self.msgs[msg as usize].uncovered().map(|(_, n)| n).collect();
        let mut best: Option<(f64, Point)> = None;
        for n in uncovered {
            if let Some(p) = self.pos(n, t) {
                let d = from.dist(p);
                if best.map_or(true, |(bd, _)| d > bd) {
                    best = Some((d, p));
                }
            }
        }
        best.map(|(_, p)| p)
    }

    /// Forwarding cannot proceed. Hybrid re-runs mode selection (usually
    /// escalating to the cloud); others retry after a timer until the
    /// retry budget runs out.
    fn stuck(&mut self, msg: u32, holder: u32, _hop: u32) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        if self.kind == ProtocolKind::HybridVehcloud
            && !matches!(
                self.msgs[msg as usize].current_mode,
                DisseminationMode::CloudGateway
            )
        {
            if let Some(p) = self.pos(holder, self.now()) {
                if self.run_select_mode(holder, p) == DisseminationMode::CloudGateway
                    || !self.buses.is_empty()
                {
                    let t = self.now();
                    let m = &mut self.msgs[msg as usize];
                    m.current_mode = DisseminationMode::CloudGateway;
                    m.escalations += 1;
                    m.hop_trace.push((holder, t));
                    // The source still holds the message; it re-issues it
                    // on the cloud path rather than the chain tail, which
                    // tends to sit at the map edge away from any bus.
                    let src = m.source;
                    return self.cloud_init(msg, src);
                }
            }
        }
        self.schedule_retry(msg, holder)
    }

    fn schedule_retry(&mut self, msg: u32, holder: u32) -> Result<()> {
        let m = &mut self.msgs[msg as usize];
        if m.retries >= self.cfg.protocol.max_retries {
            return Ok(()); // remaining targets stay undelivered
        }
        m.retries += 1;
        let at = self.now() + self.cfg.protocol.retry_interval_s;
        if at < self.duration {
            self.queue.schedule(at, Ev::RetryTimer { msg, holder })?;
        }
        Ok(())
    }

    fn on_retry(&mut self, msg: u32, holder: u32) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        {
            let m = &mut self.msgs[msg as usize];
            m.attempt_forwarded.clear();
            m.attempt_tried.clear();
        }
        match self.msgs[msg as usize].current_mode {
            DisseminationMode::CloudGateway => {
                if self.msgs[msg as usize].in_cloud {
                    self.cloud_process(msg)
                } else {
                    self.cloud_init(msg, holder)
                }
            }
            _ => self.multihop_start(msg, holder, 0),
        }
    }

    // ---------------- cloud path ----------------

    fn cloud_init(&mut self, msg: u32, initiator: u32) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        if self.msgs[msg as usize].in_cloud {
            return self.cloud_process(msg);
        }
        // A bus holder is itself a gateway: no DSRC upload hop needed.
        if self.role(initiator) == Role::Bus {
            return self.uplink_from(msg, initiator);
        }
        let t = self.now();
        let Some(p) = self.pos(initiator, t) else {
            return self.schedule_retry(msg, initiator);
        };
        // Nearest bus with a usable uplink.
        let mut best: Option<(f64, u32)> = None;
        for &b in &self.buses.clone() {
            if let Some(bp) = self.pos(b, t) {
                if self.link_class(initiator, p, b, bp) == RegionClass::Clear {
                    let d = p.dist(bp);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, b));
                    }
                }
            }
        }
        let Some((_, gateway)) = best else {
            return self.schedule_retry(msg, initiator);
        };
        let retries = self.cfg.protocol.retry_count;
        self.mac_send(initiator, FrameKind::Upload { msg, gateway }, retries)
    }

    fn after_upload(&mut self, msg: u32, frame: u32, gateway: u32, got: bool) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        let sender = if frame == u32::MAX {
            self.msgs[msg as usize].source
        } else {
            self.frames[frame as usize].sender
        };
        if !got {
            let retries_left = if frame == u32::MAX {
                0
            } else {
                self.frames[frame as usize].retries_left
            };
            if retries_left > 0 {
                return self.mac_send(
                    sender,
                    FrameKind::Upload { msg, gateway },
                    retries_left - 1,
                );
            }
            return self.schedule_retry(msg, sender);
        }
        self.uplink_from(msg, gateway)
    }

    /// Schedule the cellular uplink + cloud processing leg from a
    /// gateway bus that now holds the message.
    fn uplink_from(&mut self, msg: u32, gateway: u32) -> Result<()> {
        let t = self.now();
        let m = &mut self.msgs[msg as usize];
        if m.hop_trace.last().map(|&(n, _)| n) != Some(gateway) {
            m.hop_trace.push((gateway, t));
        }
        let mut leg = self.cfg.cloud.uplink_delay_s + self.cfg.cloud.processing_delay_s;
        if !self.cloud_deployed {
            self.cloud_deployed = true;
            leg += self.cfg.cloud.deploy_delay_s;
        }
        self.msgs[msg as usize].in_cloud = true;
        self.queue.schedule(
            t + leg,
            Ev::CloudLeg {
                msg,
                leg: CloudLegKind::Process,
            },
        )?;
        Ok(())
    }

    fn gateway_infos(&mut self) -> Vec<GatewayInfo> {
        let t = self.now();
        self.buses
            .clone()
            .iter()
            .filter_map(|&b| {
                self.pos(b, t).map(|p| GatewayInfo {
                    gateway_id: self.nodes[b as usize].id.clone(),
                    pos: p,
                    access_delay_s: 0.0,
                    bandwidth_bps: self.cfg.mac.data_rate_bps,
                })
            })
            .collect()
    }

    fn cloud_process(&mut self, msg: u32) -> Result<()> {
        if self.msgs[msg as usize].done {
            return Ok(());
        }
        let t = self.now();
        let candidates = self.gateway_infos();
        let uncovered: Vec<u32> = self.msgs[msg as usize].uncovered().map(|(_, n)| n).collect();
        let targets: Vec<(String, Point)> = uncovered
            .iter()
            .filter_map(|&n| {
                self.pos(n, t)
                    .map(|p| (self.nodes[n as usize].id.clone(), p))
            })
            .collect();
        // Gateway -> vehicle links use the bus link rules.
        let obstacles: &[crate::obstacle::Obstacle] = if self.cfg.link.bus_links_clear_obstacles {
            &[]
        } else {
            &self.scenario.obstacles
        };
        let selected = select_gateways(
            &candidates,
            &targets,
            obstacles,
            &self.bus_lm,
            self.cfg.protocol.k_max_gateways,
        );
        if selected.is_empty() {
            let holder = self.msgs[msg as usize].source;
            return self.schedule_retry(msg, holder);
        }
        for (i, id) in selected.iter().enumerate() {
            let gw = self
                .nodes
                .iter()
                .position(|n| &n.id == id)
                .expect("gateway id resolves") as u32;
            // The cloud pushes the unicast downlinks one gateway at a
            // time; stagger them so same-message broadcasts from hidden
            // gateways cannot overlap on air.
            let arrival = t + self.cfg.cloud.downlink_delay_s + i as f64 * 2.0 * self.tx_dur;
            self.queue.schedule(
                arrival,
                Ev::CloudLeg {
                    msg,
                    leg: CloudLegKind::Downlink { gateway: gw },
                },
            )?;
        }
        // Check for stragglers after the broadcasts settle.
        let holder = self.msgs[msg as usize].source;
        self.schedule_retry(msg, holder)?;
        Ok(())
    }

    fn on_cloud_leg(&mut self, msg: u32, leg: CloudLegKind) -> Result<()> {
        match leg {
            CloudLegKind::Process => self.cloud_process(msg),
            CloudLegKind::Downlink { gateway } => {
                if self.msgs[msg as usize].done {
                    return Ok(());
                }
                let t = self.now();
                self.msgs[msg as usize].hop_trace.push((gateway, t));
                self.mac_send(gateway, FrameKind::GatewayBroadcast { msg }, 0)
            }
        }
    }

    // ------------------------------------------------------------------
    // Run loop
    // ------------------------------------------------------------------

    fn run(&mut self) -> Result<RunResult> {
        // Beacons: staggered start per node.
        let interval = self.cfg.protocol.beacon_interval_s;
        for i in 0..self.nodes.len() as u32 {
            let offset = self.rng_mac.gen::<f64>() * interval;
            self.queue.schedule(offset, Ev::BeaconTick { node: i })?;
        }
        // Workload: each car draws its first origination time.
        let rate = self.cfg.workload.msgs_per_sec_per_10_vehicles / 10.0;
        if rate > 0.0 {
            for &car in &self.cars.clone() {
                let first = -(1.0 - self.rng_workload.gen::<f64>()).ln() / rate;
                if first < self.duration {
                    self.queue
                        .schedule(first, Ev::MessageOrigination { node: car })?;
                }
            }
        }
        self.queue.schedule(self.duration, Ev::SimEnd)?;

        while let Some(ev) = self.queue.pop() {
            self.events_processed += 1;
            if let Some(w) = self.event_log.as_mut() {
                writeln!(w, "t={:.9} seq={} {}", ev.time, ev.seq, describe(&ev.payload))
                    .map_err(|e| SimError::Integrity(format!("event log write failed: {e}")))?;
            }
            match ev.payload {
                Ev::SimEnd => break,
                Ev::BeaconTick { node } => {
                    if self.pos(node, ev.time).is_some() {
                        self.mac_send(node, FrameKind::Beacon, 0)?;
                    }
                    let next = ev.time + interval;
                    if next < self.duration {
                        self.queue.schedule(next, Ev::BeaconTick { node })?;
                    }
                }
                Ev::TxStart { frame } => self.on_tx_start(frame)?,
                Ev::TxEnd { frame } => self.on_tx_end(frame)?,
                Ev::RxResolve { frame } => self.on_rx_resolve(frame)?,
                Ev::CloudLeg { msg, leg } => self.on_cloud_leg(msg, leg)?,
                Ev::RetryTimer { msg, holder } => self.on_retry(msg, holder)?,
                Ev::MessageOrigination { node } => self.originate(node)?,
            }
        }
        Ok(self.finalize())
    }

    fn finalize(&mut self) -> RunResult {
        let mut records = Vec::new();
        for (mi, m) in self.msgs.iter().enumerate() {
            for (i, &target) in m.targets.iter().enumerate() {
                records.push(MetricsRecord {
                    message_id: mi as u64,
                    source: self.nodes[m.source as usize].id.clone(),
                    target: self.nodes[target as usize].id.clone(),
                    outcome: if m.covered[i] {
                        DeliveryOutcome::Delivered
                    } else {
                        DeliveryOutcome::Undelivered
                    },
                    created_at: m.created_at,
                    delivered_at: m.delivered_at[i],
                    hops: m.delivered_hops[i].unwrap_or(0),
                    mode_used: m.delivered_mode[i].unwrap_or(m.current_mode),
                });
            }
        }
        let n_vehicles = self.cars.len();
        let summary = RunSummary {
            n_vehicles,
            protocol: self.kind.name().to_string(),
            seed: self.cfg.run.seed,
            mean_e2e_delay_s: metrics::end_to_end_delay(&records),
            delivery_probability: metrics::delivery_probability(&records),
            collision_ratio: metrics::collision_ratio(&self.tallies),
            avg_throughput_bps: metrics::avg_throughput(
                &records,
                self.cfg.mac.msg_size_bytes,
                self.duration,
            ),
            n_messages: self.msgs.len() as u64,
            n_pairs: records.len() as u64,
            n_delivered: records
                .iter()
                .filter(|r| r.outcome == DeliveryOutcome::Delivered)
                .count() as u64,
            mode_cloud: self.mode_counts[0],
            mode_v2v: self.mode_counts[1],
            mode_v2i: self.mode_counts[2],
        };
        let hop_traces = if self.collect_traces {
            self.msgs
                .iter()
                .enumerate()
                .map(|(mi, m)| HopTrace {
                    message_id: mi as u64,
                    source: self.nodes[m.source as usize].id.clone(),
                    created_at: m.created_at,
                    initial_mode: m.initial_mode,
                    final_mode: m.current_mode,
                    escalations: m.escalations,
                    hops: m
                        .hop_trace
                        .iter()
                        .map(|&(n, t)| (self.nodes[n as usize].id.clone(), t))
                        .collect(),
                    delivered: m.n_covered,
                    intended: m.targets.len(),
                })
                .collect()
        } else {
            Vec::new()
        };
        RunResult {
            summary,
            records,
            tallies: self.tallies,
            hop_traces,
            events_processed: self.events_processed,
        }
    }
}

fn mode_index(mode: DisseminationMode) -> usize {
    match mode {
        DisseminationMode::CloudGateway => 0,
        DisseminationMode::MultiHopV2V => 1,
        DisseminationMode::MultiHopV2I => 2,
    }
}

fn describe(ev: &Ev) -> String {
    match ev {
        Ev::BeaconTick { node } => format!("BeaconTick node={node}"),
        Ev::TxStart { frame } => format!("TxStart frame={frame}"),
        Ev::TxEnd { frame } => format!("TxEnd frame={frame}"),
        Ev::RxResolve { frame } => format!("RxResolve frame={frame}"),
        Ev::CloudLeg { msg, leg } => match leg {
            CloudLegKind::Process => format!("CloudLeg msg={msg} leg=process"),
            CloudLegKind::Downlink { gateway } => {
                format!("CloudLeg msg={msg} leg=downlink gw={gateway}")
            }
        },
        Ev::RetryTimer { msg, holder } => format!("RetryTimer msg={msg} holder={holder}"),
        Ev::MessageOrigination { node } => format!("MessageOrigination node={node}"),
        Ev::SimEnd => "SimEnd".to_string(),
    }
}
