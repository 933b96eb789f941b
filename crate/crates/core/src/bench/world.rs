//! A simulated broker with any number of client agents attached.

use crate::agents::{ClientAgent, ClientConfig, MemoryResumeStore, ResumeStore, ServerAgent};
use crate::crypto::kg;
use crate::mqtt::{Kind, MemoryStore, SessionStore};
use crate::netsim::{Network, NodeId, SimConfig};
use crate::transport::TransportConfig;
use crate::Timestamp;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::net::SocketAddr;

pub const BROKER_ADDR: SocketAddr = SocketAddr::new(
    std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 0, 1)),
    1883,
);

/// Address of client `port` on host `host`.
pub fn host_addr(host: u8, port: u16) -> SocketAddr {
    SocketAddr::from(([10, 0, 1, host], port))
}

pub struct QuicWorld {
    pub net: Network,
    pub broker: NodeId,
    pub server_pk: Vec<u8>,
    pub transport: TransportConfig,
    seed: u64,
    clients: u64,
}

impl QuicWorld {
    pub fn new(sim: SimConfig, transport: TransportConfig, seed: u64) -> Self {
        Self::with_store(sim, transport, seed, Box::new(MemoryStore::default()))
    }

    /// Like [`QuicWorld::new`] with the broker keeping sessions in `store`.
    pub fn with_store(
        sim: SimConfig,
        transport: TransportConfig,
        seed: u64,
        store: Box<dyn SessionStore>,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let signing = kg(128, &mut rng).expect("128-bit keys are supported");
        let server_pk = signing.pk.clone();
        let mut net = Network::new(sim);
        let agent = ServerAgent::new(signing, transport, store, net.now(), seed ^ 0x5e4e);
        let broker = net
            .add_node(BROKER_ADDR, Box::new(agent))
            .expect("fresh network");
        QuicWorld {
            net,
            broker,
            server_pk,
            transport,
            seed,
            clients: 0,
        }
    }

    /// Client configuration with this world's broker, key and transport
    /// settings and a seed unique to the client.
    pub fn client_config(&mut self, client_id: &str) -> ClientConfig {
        self.clients += 1;
        let mut c = ClientConfig::new(client_id, BROKER_ADDR, self.server_pk.clone());
        c.transport = self.transport;
        c.seed = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(self.clients);
        c.record = true;
        c
    }

    /// Starts a client at `addr`; its first flight goes out at the next
    /// network step.
    pub fn add_client(
        &mut self,
        addr: SocketAddr,
        config: ClientConfig,
        store: Box<dyn ResumeStore>,
    ) -> NodeId {
        let agent = ClientAgent::client_connect(config, store, self.net.now())
            .expect("valid client config");
        self.net
            .add_node(addr, Box::new(agent))
            .expect("address in use")
    }

    pub fn add_fresh_client(&mut self, addr: SocketAddr, config: ClientConfig) -> NodeId {
        self.add_client(addr, config, Box::new(MemoryResumeStore::default()))
    }

    pub fn client(&self, id: NodeId) -> &ClientAgent {
        self.net.node::<ClientAgent>(id)
    }

    pub fn client_mut(&mut self, id: NodeId) -> &mut ClientAgent {
        self.net.node_mut::<ClientAgent>(id)
    }

    pub fn server(&self) -> &ServerAgent {
        self.net.node::<ServerAgent>(self.broker)
    }

    pub fn now(&self) -> Timestamp {
        self.net.now()
    }

    /// Runs until `pred` holds, giving up after `budget` of simulated time.
    pub fn run_for(
        &mut self,
        budget: std::time::Duration,
        mut pred: impl FnMut(&QuicWorld) -> bool,
    ) -> bool {
        let limit = self.net.now() + budget;
        loop {
            if pred(self) {
                return true;
            }
            if !self.net.step(limit) {
                return pred(self);
            }
        }
    }
}

/// Whether the client has seen a message of `kind`.
pub fn has_received(c: &ClientAgent, kind: Kind) -> bool {
    c.log().iter().any(|(_, m)| m.kind == kind)
}
