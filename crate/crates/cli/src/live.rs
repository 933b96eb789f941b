//! Broker, publisher and subscriber commands. Without `--udp` the peer side
//! runs in-process on the simulator; with it, real sockets are used.

use crate::{is_loopback, write_out, CliError, Common, Outcome};
use clap::Args;
use quicmqtt::agents::{
    ClientAgent, ClientConfig, FileResumeStore, MemoryResumeStore, ResumeStore, ServerAgent,
};
use quicmqtt::bench::world::{has_received, host_addr, QuicWorld};
use quicmqtt::crypto::{kg, SignatureKeyPair};
use quicmqtt::mqtt::{DirStore, Kind, MemoryStore, MqttMessage, SessionStore};
use quicmqtt::netsim::SimConfig;
use quicmqtt::time::WallClock;
use quicmqtt::transport::TransportConfig;
use quicmqtt::udp::UdpDriver;
use rand::rngs::OsRng;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

const KEY_FILE: &str = "broker.key";
const PUB_FILE: &str = "broker.pub";
const SETUP_BUDGET: Duration = Duration::from_secs(30);

#[derive(Args)]
pub struct BrokerArgs {
    #[arg(long, default_value = "127.0.0.1:1883")]
    listen: SocketAddr,
    /// Stop after this many seconds; runs until killed otherwise.
    #[arg(long)]
    duration_s: Option<u64>,
}

#[derive(Args)]
pub struct Remote {
    /// Broker address; enables real-UDP mode.
    #[arg(long)]
    udp: Option<SocketAddr>,
    /// Broker public key file (`broker.pub` in the broker's state dir).
    #[arg(long, requires = "udp")]
    server_key: Option<PathBuf>,
}

#[derive(Args)]
pub struct PubArgs {
    #[arg(long)]
    topic: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 100)]
    interval_ms: u64,
    #[arg(long, default_value = "hello")]
    message: String,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    qos: u8,
    #[arg(long)]
    retain: bool,
    /// Resume with 0-RTT from a stored session file when one is fresh.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value = "cli-pub")]
    client_id: String,
    #[command(flatten)]
    remote: Remote,
}

#[derive(Args)]
pub struct SubArgs {
    #[arg(long)]
    topic: String,
    /// Exit after this many deliveries.
    #[arg(long)]
    count: Option<usize>,
    /// Ask the broker to keep the subscription across reconnects.
    #[arg(long)]
    persist: bool,
    /// Rely on a restored session instead of sending SUBSCRIBE.
    #[arg(long, requires = "persist")]
    skip_subscribe: bool,
    #[arg(long, default_value = "cli-sub")]
    client_id: String,
    /// Give up after this many seconds.
    #[arg(long, default_value_t = 30)]
    duration_s: u64,
    #[command(flatten)]
    remote: Remote,
}

fn print_delivery(m: &MqttMessage) {
    println!("{} {}", m.topic, String::from_utf8_lossy(&m.payload));
}

fn broker_store(state_dir: &Option<PathBuf>) -> Result<Box<dyn SessionStore>, CliError> {
    Ok(match state_dir {
        Some(d) => Box::new(DirStore::new(d)?),
        None => Box::new(MemoryStore::default()),
    })
}

fn wall_now() -> WallClock {
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    WallClock { unix_base: unix }
}

fn udp_seed(c: &Common) -> u64 {
    c.seed.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    })
}

fn load_or_create_key(dir: &Path) -> Result<SignatureKeyPair, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(KEY_FILE);
    let kp = match std::fs::read(&path) {
        Ok(sk) => SignatureKeyPair::from_secret(&sk)
            .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let kp = kg(128, &mut OsRng).map_err(|e| CliError::Run(e.to_string()))?;
            std::fs::write(&path, &kp.sk)?;
            kp
        }
        Err(e) => return Err(e.into()),
    };
    std::fs::write(dir.join(PUB_FILE), &kp.pk)?;
    Ok(kp)
}

pub fn broker(c: &Common, a: &BrokerArgs) -> Outcome {
    let dir = c
        .state_dir
        .as_ref()
        .ok_or_else(|| CliError::Usage("broker needs --state-dir for its key".into()))?;
    let signing = load_or_create_key(dir)?;
    let transport = TransportConfig {
        wall: wall_now(),
        ..TransportConfig::default()
    };
    let agent = ServerAgent::new(
        signing,
        transport,
        broker_store(&c.state_dir)?,
        quicmqtt::Timestamp::default(),
        udp_seed(c),
    );
    let mut d = UdpDriver::bind(a.listen, agent)?;
    d.record_labels(c.trace.is_some());
    eprintln!("listening on {}", d.local_addr()?);
    let total = a.duration_s.map(Duration::from_secs);
    let start = std::time::Instant::now();
    loop {
        let left = total.map_or(Duration::from_secs(3600), |t| {
            t.saturating_sub(start.elapsed())
        });
        if left.is_zero() {
            break;
        }
        d.run(left.min(Duration::from_secs(3600)), |_| false)?;
    }
    let s = d.node().stats();
    eprintln!(
        "messages in {} out {} connections {}",
        s.messages_in,
        s.messages_out,
        d.node().connection_count()
    );
    write_out(&c.trace, &labels(d.sent_labels()))?;
    Ok(true)
}

fn labels(l: &[String]) -> String {
    l.iter().map(|s| format!("{s}\n")).collect()
}

fn remote_config(
    c: &Common,
    r: &Remote,
    client_id: &str,
) -> Result<(ClientConfig, SocketAddr), CliError> {
    let server = r.udp.expect("udp mode");
    let key_path = match (&r.server_key, &c.state_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(PUB_FILE),
        (None, None) => {
            return Err(CliError::Usage(
                "--udp needs --server-key or --state-dir".into(),
            ))
        }
    };
    let pk = std::fs::read(&key_path)
        .map_err(|e| CliError::Run(format!("{}: {e}", key_path.display())))?;
    let mut cfg = ClientConfig::new(client_id, server, pk);
    cfg.transport.wall = wall_now();
    cfg.seed = udp_seed(c);
    let bind: SocketAddr = if is_loopback(server) {
        "127.0.0.1:0"
    } else {
        "0.0.0.0:0"
    }
    .parse()
    .expect("literal");
    Ok((cfg, bind))
}

fn resume_store(c: &Common, resume: bool) -> Result<Box<dyn ResumeStore>, CliError> {
    Ok(match (&c.state_dir, resume) {
        (Some(d), true) => Box::new(FileResumeStore::new(d)?),
        _ => Box::new(MemoryResumeStore::default()),
    })
}

pub fn publish(c: &Common, a: &PubArgs) -> Outcome {
    if a.remote.udp.is_some() {
        publish_udp(c, a)
    } else {
        publish_sim(c, a)
    }
}

pub fn subscribe(c: &Common, a: &SubArgs) -> Outcome {
    if a.remote.udp.is_some() {
        subscribe_udp(c, a)
    } else {
        subscribe_sim(c, a)
    }
}

fn publish_udp(c: &Common, a: &PubArgs) -> Outcome {
    let (cfg, bind) = remote_config(c, &a.remote, &a.client_id)?;
    let agent = ClientAgent::client_connect(
        cfg,
        resume_store(c, a.resume)?,
        quicmqtt::Timestamp::default(),
    )
    .map_err(|e| CliError::Run(e.to_string()))?;
    let mut d = UdpDriver::bind(bind, agent)?;
    d.record_labels(c.trace.is_some());
    d.flush()?;
    let connected = d.run(Duration::from_secs(10), |n| {
        n.state() == quicmqtt::agents::MqttState::Connected
    })?;
    eprintln!("handshake {:?}", d.node().mode());
    if connected {
        for k in 0..a.count {
            if k > 0 {
                d.run(Duration::from_millis(a.interval_ms), |_| false)?;
            }
            d.node_mut()
                .publish(&a.topic, a.message.as_bytes(), a.qos, a.retain)
                .map_err(|e| CliError::Run(e.to_string()))?;
        }
        d.node_mut().disconnect();
        d.run(Duration::from_secs(5), |n| n.is_closed())?;
    }
    write_out(&c.trace, &labels(d.sent_labels()))?;
    if !connected {
        return Err(CliError::Run(format!(
            "no CONNACK from {}",
            a.remote.udp.expect("udp mode")
        )));
    }
    Ok(true)
}

fn subscribe_udp(c: &Common, a: &SubArgs) -> Outcome {
    let (mut cfg, bind) = remote_config(c, &a.remote, &a.client_id)?;
    cfg.persist = a.persist;
    let mut agent = ClientAgent::client_connect(
        cfg,
        Box::new(MemoryResumeStore::default()),
        quicmqtt::Timestamp::default(),
    )
    .map_err(|e| CliError::Run(e.to_string()))?;
    if !a.skip_subscribe {
        agent
            .subscribe(&a.topic, 0)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut d = UdpDriver::bind(bind, agent)?;
    d.record_labels(c.trace.is_some());
    let want = a.count.unwrap_or(usize::MAX);
    let mut got = 0;
    let done = d.run(Duration::from_secs(a.duration_s), |n| {
        while let Some(m) = n.poll_message() {
            match m.kind {
                Kind::Publish => {
                    print_delivery(&m);
                    got += 1;
                }
                Kind::Connack if m.persist => eprintln!("session present"),
                _ => {}
            }
        }
        got >= want || n.is_closed()
    })?;
    d.node_mut().disconnect();
    d.run(Duration::from_secs(2), |n| n.is_closed())?;
    write_out(&c.trace, &labels(d.sent_labels()))?;
    Ok(a.count.is_none() || (done && got >= want))
}

fn sim_world(c: &Common) -> Result<QuicWorld, CliError> {
    let sim = SimConfig::from_profile(c.profile()?, c.sim_seed());
    Ok(QuicWorld::with_store(
        sim,
        TransportConfig::default(),
        c.sim_seed(),
        broker_store(&c.state_dir)?,
    ))
}

fn publish_sim(c: &Common, a: &PubArgs) -> Outcome {
    let mut w = sim_world(c)?;
    let oc = w.client_config("cli-observer");
    let observer = w.add_fresh_client(host_addr(2, 1883), oc);
    w.client_mut(observer)
        .subscribe(&a.topic, a.qos)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !w.run_for(SETUP_BUDGET, |w| {
        has_received(w.client(observer), Kind::Suback)
    }) {
        return Err(CliError::Run("observer never subscribed".into()));
    }
    let store: Box<dyn ResumeStore> = match (&c.state_dir, a.resume) {
        (Some(d), true) => Box::new(FileResumeStore::new(d)?),
        (None, true) => {
            // No session on disk: warm one up in memory first.
            let mem = MemoryResumeStore::default();
            let cfg = w.client_config(&format!("{}-warmup", a.client_id));
            let p = w.add_client(host_addr(1, 5000), cfg, Box::new(mem.clone()));
            w.run_for(SETUP_BUDGET, |w| has_received(w.client(p), Kind::Connack));
            w.client_mut(p).disconnect();
            w.run_for(SETUP_BUDGET, |w| w.client(p).is_closed());
            Box::new(mem)
        }
        _ => Box::new(MemoryResumeStore::default()),
    };
    let since = w.net.trace().len();
    let cfg = w.client_config(&a.client_id);
    let p = w.add_client(host_addr(1, 5001), cfg, store);
    if !w.run_for(SETUP_BUDGET, |w| has_received(w.client(p), Kind::Connack)) {
        return Err(CliError::Run("publisher never connected".into()));
    }
    eprintln!("handshake {:?}", w.client(p).mode());
    if let Some(l) = w.net.trace().first_sent_label(p, since) {
        eprintln!("first datagram {l}");
    }
    let base = w.client(observer).log().len();
    let start = w.now();
    for k in 0..a.count {
        w.net
            .run_until(start + Duration::from_millis(a.interval_ms) * k as u32);
        w.client_mut(p)
            .publish(&a.topic, a.message.as_bytes(), a.qos, a.retain)
            .map_err(|e| CliError::Run(e.to_string()))?;
        w.net.flush();
    }
    let delivered = |w: &QuicWorld| {
        w.client(observer).log()[base..]
            .iter()
            .filter(|(_, m)| m.kind == Kind::Publish)
            .count()
    };
    w.run_for(SETUP_BUDGET, |w| delivered(w) >= a.count);
    w.client_mut(p).disconnect();
    w.run_for(SETUP_BUDGET, |w| w.client(p).is_closed());
    for (_, m) in &w.client(observer).log()[base..] {
        if m.kind == Kind::Publish {
            print_delivery(m);
        }
    }
    write_out(&c.trace, &w.net.trace().to_csv())?;
    Ok(delivered(&w) == a.count)
}

fn subscribe_sim(c: &Common, a: &SubArgs) -> Outcome {
    let mut w = sim_world(c)?;
    let mut cfg = w.client_config(&a.client_id);
    cfg.persist = a.persist;
    let s = w.add_fresh_client(host_addr(2, 1883), cfg);
    if !a.skip_subscribe {
        w.client_mut(s)
            .subscribe(&a.topic, 0)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ready = w.run_for(SETUP_BUDGET, |w| {
        let c = w.client(s);
        has_received(c, Kind::Connack) && (a.skip_subscribe || has_received(c, Kind::Suback))
    });
    if !ready {
        return Err(CliError::Run("subscriber never connected".into()));
    }
    if w.client(s)
        .log()
        .iter()
        .any(|(_, m)| m.kind == Kind::Connack && m.persist)
    {
        eprintln!("session present");
    }
    let pc = w.client_config("cli-feed");
    let p = w.add_fresh_client(host_addr(1, 1883), pc);
    w.run_for(SETUP_BUDGET, |w| has_received(w.client(p), Kind::Connack));
    let count = a.count.unwrap_or(1);
    let start = w.now();
    for k in 0..count {
        w.net
            .run_until(start + Duration::from_millis(100) * k as u32);
        w.client_mut(p)
            .publish(&a.topic, format!("message {k}").as_bytes(), 0, false)
            .expect("topic validated by subscribe");
        w.net.flush();
    }
    let got = |w: &QuicWorld| {
        w.client(s)
            .log()
            .iter()
            .filter(|(_, m)| m.kind == Kind::Publish)
            .count()
    };
    w.run_for(Duration::from_secs(a.duration_s), |w| got(w) >= count);
    for (_, m) in w.client(s).log() {
        if m.kind == Kind::Publish {
            print_delivery(m);
        }
    }
    w.client_mut(s).disconnect();
    w.run_for(SETUP_BUDGET, |w| w.client(s).is_closed());
    write_out(&c.trace, &w.net.trace().to_csv())?;
    Ok(got(&w) >= count)
}
