//! Multi-site runtime: gradient broadcast/aggregate rounds, variance
//! collection, and communication accounting.
//!
//! Site 0 is the master and holds its data locally; every other site is
//! reachable only through a node handle, so the only cross-site payloads are
//! parameter vectors, gradient vectors, and variance matrices on a restricted
//! index set. Two node transports exist: in-process (simulation) and a framed
//! TCP socket protocol.
//!
//! # Wire format (socket transport)
//!
//! ```text
//! [1-byte tag][8-byte little-endian payload length][payload]
//! ```
//!
//! Tags:
//! - `0x01` ParamBroadcast — payload: 8-byte count, then count LE doubles.
//!   The worker caches the parameter and answers with a GradientReply.
//! - `0x02` GradientReply — same layout as ParamBroadcast.
//! - `0x03` VarianceRequest — payload: index list as 8-byte LE unsigned.
//!   An empty index list is answered with just the site size (used once at
//!   connection setup to learn n_k).
//! - `0x04` VarianceReply — payload: n_k as 8-byte LE unsigned, then J̃_k
//!   row-major doubles, then K̃_k row-major doubles.
//! - `0x05` Shutdown — empty payload; the worker exits.
//!
//! One TCP connection per site; the master initiates.

use std::cell::OnceCell;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, GlmFamily, SiteData};

const TAG_PARAM_BROADCAST: u8 = 0x01;
const TAG_GRADIENT_REPLY: u8 = 0x02;
const TAG_VARIANCE_REQUEST: u8 = 0x03;
const TAG_VARIANCE_REPLY: u8 = 0x04;
const TAG_SHUTDOWN: u8 = 0x05;

const MAX_FRAME: u64 = 1 << 31;

/// Communication accounting. Byte counters track logical payload sizes
/// (vectors and matrices as 8-byte doubles), excluding frame headers, so the
/// two transports account identically.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub rounds: u64,
    pub bytes_to_sites: u64,
    pub bytes_from_sites: u64,
}

impl CommStats {
    /// Counter-wise difference `self − earlier`.
    pub fn since(&self, earlier: &CommStats) -> CommStats {
        CommStats {
            rounds: self.rounds - earlier.rounds,
            bytes_to_sites: self.bytes_to_sites - earlier.bytes_to_sites,
            bytes_from_sites: self.bytes_from_sites - earlier.bytes_from_sites,
        }
    }

    /// Counter-wise sum.
    pub fn plus(&self, other: &CommStats) -> CommStats {
        CommStats {
            rounds: self.rounds + other.rounds,
            bytes_to_sites: self.bytes_to_sites + other.bytes_to_sites,
            bytes_from_sites: self.bytes_from_sites + other.bytes_from_sites,
        }
    }
}

/// Local variance estimates returned by one site: `j = ∇²L̂_k` and
/// `k = (1/n_k)·scoresᵀscores`, both on the restricted index set.
#[derive(Debug, Clone)]
pub struct SiteVariance {
    pub site: usize,
    pub n: usize,
    pub j: Array2<f64>,
    pub k: Array2<f64>,
}

/// One remote site. Requests and replies are split so a round can pipeline
/// across sites; the aggregation itself always reduces in site order, which
/// keeps results bitwise reproducible regardless of completion order.
trait SiteNode: Send {
    fn n(&self) -> usize;
    fn send_param(&mut self, beta: &Array1<f64>) -> Result<()>;
    fn recv_gradient(&mut self, p: usize) -> Result<Array1<f64>>;
    fn send_variance_request(&mut self, idx: &[usize]) -> Result<()>;
    fn recv_variance(&mut self, k: usize) -> Result<SiteVariance>;
    fn shutdown(&mut self);
}

struct InProcessNode {
    site: usize,
    fam: GlmFamily,
    data: SiteData,
    cached_param: Option<Array1<f64>>,
    pending_idx: Vec<usize>,
}

impl SiteNode for InProcessNode {
    fn n(&self) -> usize {
        self.data.n()
    }

    fn send_param(&mut self, beta: &Array1<f64>) -> Result<()> {
        self.cached_param = Some(beta.clone());
        Ok(())
    }

    fn recv_gradient(&mut self, _p: usize) -> Result<Array1<f64>> {
        let beta = self.cached_param.as_ref().ok_or_else(|| Error::InvalidArg(
            "gradient requested before any parameter broadcast".into(),
        ))?;
        model::gradient(self.fam, beta, &self.data)
    }

    fn send_variance_request(&mut self, idx: &[usize]) -> Result<()> {
        self.pending_idx = idx.to_vec();
        Ok(())
    }

    fn recv_variance(&mut self, k: usize) -> Result<SiteVariance> {
        debug_assert_eq!(self.pending_idx.len(), k);
        if k == 0 {
            return Ok(SiteVariance {
                site: self.site,
                n: self.data.n(),
                j: Array2::zeros((0, 0)),
                k: Array2::zeros((0, 0)),
            });
        }
        let beta = self.cached_param.as_ref().ok_or_else(|| Error::InvalidArg(
            "variance requested before any parameter broadcast".into(),
        ))?;
        let (j, kk) = site_variance_matrices(self.fam, beta, &self.data, &self.pending_idx)?;
        Ok(SiteVariance {
            site: self.site,
            n: self.data.n(),
            j,
            k: kk,
        })
    }

    fn shutdown(&mut self) {}
}

struct SocketNode {
    site: usize,
    stream: TcpStream,
    n: usize,
}

impl SocketNode {
    fn unreachable(&self, e: impl std::fmt::Display) -> Error {
        Error::SiteUnreachable {
            site: self.site,
            reason: e.to_string(),
        }
    }
}

impl SiteNode for SocketNode {
    fn n(&self) -> usize {
        self.n
    }

    fn send_param(&mut self, beta: &Array1<f64>) -> Result<()> {
        let mut payload = Vec::with_capacity(8 + 8 * beta.len());
        payload.extend_from_slice(&(beta.len() as u64).to_le_bytes());
        for &v in beta.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_frame(&mut self.stream, TAG_PARAM_BROADCAST, &payload)
            .map_err(|e| self.unreachable(e))
    }

    fn recv_gradient(&mut self, p: usize) -> Result<Array1<f64>> {
        let (tag, payload) = read_frame(&mut self.stream).map_err(|e| self.unreachable(e))?;
        if tag != TAG_GRADIENT_REPLY {
            return Err(self.unreachable(format!("unexpected frame tag {tag:#04x}")));
        }
        if payload.len() < 8 {
            return Err(self.unreachable("truncated gradient reply"));
        }
        let count = u64::from_le_bytes(payload[0..8].try_into().unwrap()) as usize;
        if count != p || payload.len() != 8 + 8 * count {
            return Err(Error::DimensionMismatch(format!(
                "site {} returned a gradient of length {count}, expected {p}",
                self.site
            )));
        }
        Ok(read_f64s(&payload[8..], count))
    }

    fn send_variance_request(&mut self, idx: &[usize]) -> Result<()> {
        let mut payload = Vec::with_capacity(8 * idx.len());
        for &i in idx {
            payload.extend_from_slice(&(i as u64).to_le_bytes());
        }
        write_frame(&mut self.stream, TAG_VARIANCE_REQUEST, &payload)
            .map_err(|e| self.unreachable(e))
    }

    fn recv_variance(&mut self, k: usize) -> Result<SiteVariance> {
        let (tag, payload) = read_frame(&mut self.stream).map_err(|e| self.unreachable(e))?;
        if tag != TAG_VARIANCE_REPLY {
            return Err(self.unreachable(format!("unexpected frame tag {tag:#04x}")));
        }
        let want = 8 + 2 * 8 * k * k;
        if payload.len() != want {
            return Err(self.unreachable(format!(
                "variance reply has {} bytes, expected {want}",
                payload.len()
            )));
        }
        let n = u64::from_le_bytes(payload[0..8].try_into().unwrap()) as usize;
        let j = read_f64s(&payload[8..8 + 8 * k * k], k * k);
        let kk = read_f64s(&payload[8 + 8 * k * k..], k * k);
        Ok(SiteVariance {
            site: self.site,
            n,
            j: Array2::from_shape_vec((k, k), j.to_vec()).unwrap(),
            k: Array2::from_shape_vec((k, k), kk.to_vec()).unwrap(),
        })
    }

    fn shutdown(&mut self) {
        let _ = write_frame(&mut self.stream, TAG_SHUTDOWN, &[]);
    }
}

/// The simulated cluster: the master's data plus node handles for the other
/// sites, with round/byte accounting.
pub struct Cluster {
    fam: GlmFamily,
    master: SiteData,
    remotes: Vec<Box<dyn SiteNode>>,
    stats: CommStats,
    last_broadcast: Option<Array1<f64>>,
    master_gram_norm: OnceCell<f64>,
}

impl Cluster {
    /// Build an in-process cluster. `sites[0]` becomes the master; site ids
    /// are assigned by position.
    pub fn in_process(fam: GlmFamily, mut sites: Vec<SiteData>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::InvalidConfig("a cluster needs at least one site".into()));
        }
        let p = sites[0].p();
        for (i, s) in sites.iter_mut().enumerate() {
            if s.p() != p {
                return Err(Error::SchemaMismatch(format!(
                    "site {i} has {} columns, master has {p}",
                    s.p()
                )));
            }
            s.site_id = i;
        }
        let master = sites.remove(0);
        let remotes = sites
            .into_iter()
            .map(|data| {
                Box::new(InProcessNode {
                    site: data.site_id,
                    fam,
                    data,
                    cached_param: None,
                    pending_idx: Vec::new(),
                }) as Box<dyn SiteNode>
            })
            .collect();
        Ok(Self {
            fam,
            master,
            remotes,
            stats: CommStats::default(),
            last_broadcast: None,
            master_gram_norm: OnceCell::new(),
        })
    }

    /// Build a cluster over socket workers. The master's own data stays
    /// local; each address is one remote site. Site sizes are learned with an
    /// empty-index variance request at connection time, after which the
    /// accounting counters start from zero.
    pub fn with_sockets<A: ToSocketAddrs + std::fmt::Debug>(
        fam: GlmFamily,
        mut master: SiteData,
        addrs: &[A],
    ) -> Result<Self> {
        master.site_id = 0;
        let mut remotes: Vec<Box<dyn SiteNode>> = Vec::with_capacity(addrs.len());
        for (i, addr) in addrs.iter().enumerate() {
            let site = i + 1;
            let stream = TcpStream::connect(addr).map_err(|e| Error::SiteUnreachable {
                site,
                reason: format!("connect to {addr:?}: {e}"),
            })?;
            stream.set_nodelay(true).ok();
            let mut node = SocketNode { site, stream, n: 0 };
            node.send_variance_request(&[])?;
            let v = node.recv_variance(0)?;
            node.n = v.n;
            remotes.push(Box::new(node));
        }
        Ok(Self {
            fam,
            master,
            remotes,
            stats: CommStats::default(),
            last_broadcast: None,
            master_gram_norm: OnceCell::new(),
        })
    }

    /// Number of sites, master included.
    pub fn m(&self) -> usize {
        1 + self.remotes.len()
    }

    /// Total sample size N = Σ n_k.
    pub fn n_total(&self) -> usize {
        self.master.n() + self.remotes.iter().map(|r| r.n()).sum::<usize>()
    }

    /// Per-site sample sizes in site order.
    pub fn site_sizes(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.m());
        v.push(self.master.n());
        v.extend(self.remotes.iter().map(|r| r.n()));
        v
    }

    /// Parameter dimension.
    pub fn p(&self) -> usize {
        self.master.p()
    }

    pub fn family(&self) -> GlmFamily {
        self.fam
    }

    /// The master's own site data (local by construction).
    pub fn master(&self) -> &SiteData {
        &self.master
    }

    /// Spectral norm of the master design Gram matrix `X₁ᵀX₁/n₁`, estimated
    /// by power iteration and cached. Inner solvers derive their initial
    /// step size from this.
    pub fn master_gram_norm(&self) -> f64 {
        *self.master_gram_norm.get_or_init(|| {
            let x = &self.master.x;
            let n = self.master.n() as f64;
            let p = self.master.p();
            let mut v = Array1::from_elem(p, 1.0 / (p as f64).sqrt());
            let mut lam = 1e-12f64;
            for _ in 0..60 {
                let xv = x.dot(&v);
                let mut w = x.t().dot(&xv);
                w.mapv_inplace(|t| t / n);
                let norm = w.dot(&w).sqrt();
                if norm <= 1e-300 {
                    return 1e-12;
                }
                lam = norm;
                v = w / norm;
            }
            lam
        })
    }

    /// Accounting snapshot.
    pub fn stats(&self) -> CommStats {
        self.stats
    }

    /// One gradient round: broadcast `beta`, aggregate the n_k-weighted
    /// average of local gradients, which equals the pooled-data gradient.
    /// Adds one round and `m·8·p` payload bytes in each direction.
    pub fn global_gradient(&mut self, beta: &Array1<f64>) -> Result<Array1<f64>> {
        let p = self.p();
        if beta.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "parameter length {} vs cluster dimension {p}",
                beta.len()
            )));
        }
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("broadcast parameter".into()));
        }
        let n_total = self.n_total() as f64;
        for node in self.remotes.iter_mut() {
            node.send_param(beta)?;
        }
        let w0 = self.master.n() as f64 / n_total;
        let mut g = model::gradient(self.fam, beta, &self.master)?;
        g.mapv_inplace(|v| v * w0);
        for node in self.remotes.iter_mut() {
            let gk = node.recv_gradient(p)?;
            let wk = node.n() as f64 / n_total;
            g.scaled_add(wk, &gk);
        }
        let m = self.m() as u64;
        self.stats.rounds += 1;
        self.stats.bytes_to_sites += m * 8 * p as u64;
        self.stats.bytes_from_sites += m * 8 * p as u64;
        self.last_broadcast = Some(beta.clone());
        Ok(g)
    }

    /// The master's local gradient; no communication, no accounting change.
    pub fn master_gradient(&self, beta: &Array1<f64>) -> Result<Array1<f64>> {
        model::gradient(self.fam, beta, &self.master)
    }

    /// The master's local Hessian on `idx`; no communication.
    pub fn master_hessian(&self, beta: &Array1<f64>, idx: &[usize]) -> Result<Array2<f64>> {
        model::hessian(self.fam, beta, &self.master, idx)
    }

    /// The master's local loss; no communication.
    pub fn master_loss(&self, beta: &Array1<f64>) -> Result<f64> {
        model::loss(self.fam, beta, &self.master)
    }

    /// One variance round: every site with `n_k ≥ min_site_n` returns its
    /// local `(n_k, J̃_k, K̃_k)` on `idx`. Sites below the threshold are
    /// excluded to avoid singular local Hessians. Payload accounting is
    /// `8·|idx|` to and `2·8·|idx|² + 8` from each participating site.
    ///
    /// `beta_hat` must be the most recently broadcast parameter; if it is
    /// not, a gradient round is performed first to synchronize the sites.
    pub fn collect_variance(
        &mut self,
        beta_hat: &Array1<f64>,
        idx: &[usize],
        min_site_n: usize,
    ) -> Result<Vec<SiteVariance>> {
        let in_sync = self
            .last_broadcast
            .as_ref()
            .map(|b| b == beta_hat)
            .unwrap_or(false);
        if !in_sync {
            self.global_gradient(beta_hat)?;
        }
        let k = idx.len();
        let eligible: Vec<usize> = (0..self.remotes.len())
            .filter(|&i| self.remotes[i].n() >= min_site_n)
            .collect();
        let master_in = self.master.n() >= min_site_n;
        if !master_in && eligible.is_empty() {
            return Err(Error::NoEligibleSites { min_site_n });
        }
        for &i in &eligible {
            self.remotes[i].send_variance_request(idx)?;
        }
        let mut out = Vec::with_capacity(eligible.len() + 1);
        if master_in {
            let (j, kk) = site_variance_matrices(self.fam, beta_hat, &self.master, idx)?;
            out.push(SiteVariance {
                site: 0,
                n: self.master.n(),
                j,
                k: kk,
            });
        }
        for &i in &eligible {
            out.push(self.remotes[i].recv_variance(k)?);
        }
        let participants = out.len() as u64;
        self.stats.rounds += 1;
        self.stats.bytes_to_sites += participants * 8 * k as u64;
        self.stats.bytes_from_sites += participants * (2 * 8 * (k * k) as u64 + 8);
        Ok(out)
    }

    /// Send shutdown frames to socket workers (no-op for in-process nodes).
    pub fn shutdown(mut self) {
        for node in self.remotes.iter_mut() {
            node.shutdown();
        }
    }
}

/// Local variance pair for one site: empirical Hessian and score covariance
/// on the restricted index set.
fn site_variance_matrices(
    fam: GlmFamily,
    beta: &Array1<f64>,
    data: &SiteData,
    idx: &[usize],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let j = model::hessian(fam, beta, data, idx)?;
    let s = model::per_sample_scores(fam, beta, data, idx)?;
    let mut k = s.t().dot(&s);
    k.mapv_inplace(|v| v / data.n() as f64);
    Ok((j, k))
}

fn write_frame<W: Write>(w: &mut W, tag: u8, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&[tag])?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

fn read_frame<R: Read>(r: &mut R) -> std::io::Result<(u8, Vec<u8>)> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    let tag = head[0];
    let len = u64::from_le_bytes(head[1..9].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok((tag, payload))
}

fn read_f64s(bytes: &[u8], count: usize) -> Array1<f64> {
    let mut out = Array1::<f64>::zeros(count);
    for i in 0..count {
        out[i] = f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    }
    out
}

/// Serve one site's data over an accepted socket connection until a Shutdown
/// frame or EOF. This is the worker half of the socket transport.
pub fn serve_site(stream: &mut TcpStream, fam: GlmFamily, data: &SiteData) -> Result<()> {
    stream.set_nodelay(true).ok();
    let mut cached: Option<Array1<f64>> = None;
    loop {
        let (tag, payload) = match read_frame(stream) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match tag {
            TAG_PARAM_BROADCAST => {
                if payload.len() < 8 {
                    return Err(Error::InvalidArg("truncated parameter broadcast".into()));
                }
                let count = u64::from_le_bytes(payload[0..8].try_into().unwrap()) as usize;
                if payload.len() != 8 + 8 * count {
                    return Err(Error::InvalidArg("malformed parameter broadcast".into()));
                }
                let beta = read_f64s(&payload[8..], count);
                let g = model::gradient(fam, &beta, data)?;
                cached = Some(beta);
                let mut reply = Vec::with_capacity(8 + 8 * g.len());
                reply.extend_from_slice(&(g.len() as u64).to_le_bytes());
                for &v in g.iter() {
                    reply.extend_from_slice(&v.to_le_bytes());
                }
                write_frame(stream, TAG_GRADIENT_REPLY, &reply)?;
            }
            TAG_VARIANCE_REQUEST => {
                if payload.len() % 8 != 0 {
                    return Err(Error::InvalidArg("malformed variance request".into()));
                }
                let k = payload.len() / 8;
                let idx: Vec<usize> = (0..k)
                    .map(|i| {
                        u64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap()) as usize
                    })
                    .collect();
                let mut reply = Vec::with_capacity(8 + 2 * 8 * k * k);
                reply.extend_from_slice(&(data.n() as u64).to_le_bytes());
                if k > 0 {
                    let beta = cached.as_ref().ok_or_else(|| {
                        Error::InvalidArg("variance requested before any broadcast".into())
                    })?;
                    let (j, kk) = site_variance_matrices(fam, beta, data, &idx)?;
                    for &v in j.iter() {
                        reply.extend_from_slice(&v.to_le_bytes());
                    }
                    for &v in kk.iter() {
                        reply.extend_from_slice(&v.to_le_bytes());
                    }
                }
                write_frame(stream, TAG_VARIANCE_REPLY, &reply)?;
            }
            TAG_SHUTDOWN => return Ok(()),
            other => {
                return Err(Error::InvalidArg(format!(
                    "unknown frame tag {other:#04x}"
                )))
            }
        }
    }
}

/// Bind a listener, accept a single master connection, and serve `data`.
pub fn serve_site_blocking(listener: TcpListener, fam: GlmFamily, data: &SiteData) -> Result<()> {
    let (mut stream, _peer) = listener.accept()?;
    serve_site(&mut stream, fam, data)
}
