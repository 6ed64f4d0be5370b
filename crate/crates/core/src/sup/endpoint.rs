use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::SupError;
use crate::proto::net::{CoordinatorServer, NetError, ServerConfig};
use crate::proto::write_atomic;

pub const ENV_HOST: &str = "CKPT_COORD_HOST";
pub const ENV_PORT: &str = "CKPT_COORD_PORT";
pub const INMEM_HOST: &str = "inmem";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Simulated transport; advertised as `inmem:<port>`.
    InMemory(u16),
    /// Loopback TCP `host:port`.
    Tcp(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, SupError> {
        let s = s.trim();
        if let Some(p) = s.strip_prefix("inmem:") {
            return p
                .parse()
                .map(Endpoint::InMemory)
                .map_err(|_| SupError::BadConfig(format!("bad in-memory endpoint {s:?}")));
        }
        match s.rsplit_once(':') {
            Some((h, p)) if !h.is_empty() && p.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(s.to_string())),
            _ => Err(SupError::BadConfig(format!("bad endpoint {s:?}, expected host:port"))),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::InMemory(p) => write!(f, "{INMEM_HOST}:{p}"),
            Endpoint::Tcp(a) => f.write_str(a),
        }
    }
}

/// Endpoints currently held by running coordinators.
#[derive(Debug, Default)]
pub struct EndpointRegistry {
    in_use: BTreeSet<String>,
}

impl EndpointRegistry {
    pub fn is_taken(&self, endpoint: &str) -> bool {
        self.in_use.contains(endpoint)
    }
}

#[derive(Debug)]
pub struct CoordinatorHandle {
    pub job_id: u64,
    /// Advertised `host:port`.
    pub endpoint: String,
    pub command_file: PathBuf,
    /// Environment handed to the job.
    pub env: Vec<(String, String)>,
    server: Option<CoordinatorServer>,
}

impl CoordinatorHandle {
    pub fn server(&self) -> Option<&CoordinatorServer> {
        self.server.as_ref()
    }
}

pub fn command_file_path(dir: &Path, job_id: u64) -> PathBuf {
    dir.join(format!("ckpt_command.{job_id}"))
}

/// Endpoint advertised in a job's command file.
pub fn read_command_file(dir: &Path, job_id: u64) -> Result<String, SupError> {
    let path = command_file_path(dir, job_id);
    let text = fs::read_to_string(&path).map_err(|e| SupError::io(&path, e))?;
    Ok(text.trim_end().to_string())
}

/// Bring up the coordinator for `job_id` and advertise it.
pub fn start_coordinator(
    reg: &mut EndpointRegistry,
    job_id: u64,
    endpoint: &Endpoint,
    dir: &Path,
    server_cfg: ServerConfig,
) -> Result<CoordinatorHandle, SupError> {
    let wanted = endpoint.to_string();
    if reg.in_use.contains(&wanted) {
        return Err(SupError::EndpointBusy(wanted));
    }
    let (advertised, server) = match endpoint {
        Endpoint::InMemory(_) => (wanted.clone(), None),
        Endpoint::Tcp(addr) => {
            let server = CoordinatorServer::bind(addr, server_cfg).map_err(|e| match e {
                NetError::EndpointBusy(a) => SupError::EndpointBusy(a),
                other => SupError::CoordinatorUnreachable(other.to_string()),
            })?;
            (server.local_addr().to_string(), Some(server))
        }
    };
    let (host, port) = advertised.rsplit_once(':').expect("endpoint has a port");
    let command_file = command_file_path(dir, job_id);
    write_atomic(&command_file, format!("{advertised}\n").as_bytes()).map_err(|e| SupError::io(&command_file, e))?;
    reg.in_use.insert(wanted.clone());
    if wanted != advertised {
        reg.in_use.insert(advertised.clone());
    }
    Ok(CoordinatorHandle {
        job_id,
        env: vec![(ENV_HOST.into(), host.into()), (ENV_PORT.into(), port.into())],
        endpoint: advertised,
        command_file,
        server,
    })
}

pub fn stop_coordinator(reg: &mut EndpointRegistry, handle: CoordinatorHandle, requested: &Endpoint) {
    reg.in_use.remove(&requested.to_string());
    reg.in_use.remove(&handle.endpoint);
    if let Some(s) = handle.server {
        s.shutdown();
    }
}
