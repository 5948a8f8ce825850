//! JSON-lines over TCP adapter for remote reasoner and evaluator backends.
//!
//! Each request is one line `{"op": ..., ...}`; each reply is one line
//! `{"ok": true, "result": ...}` or `{"ok": false, "error": "..."}`.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::backend::BackendError;
use crate::evaluator::{AnswerParser, Assessment, Assessor, EvalError, EvaluatorBackends, QueryTranslator, VqaQuery};
use crate::library::SkillQuery;
use crate::planner::{LibraryEntry, RawGroundedItem, RawPlan, ReasonerBackend, SkillAction};
use crate::prompts::PromptSet;
use crate::sim::SceneDescription;

#[derive(Debug, Deserialize)]
struct Reply {
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<String>,
}

fn io_to_backend(endpoint: &str, e: std::io::Error) -> BackendError {
    match e.kind() {
        ErrorKind::TimedOut | ErrorKind::WouldBlock => BackendError::Timeout,
        _ => BackendError::Transport(format!("{endpoint}: {e}")),
    }
}

/// Lazily connected line-oriented client. A failed call drops the connection.
#[derive(Debug)]
pub struct ExternalClient {
    endpoint: String,
    timeout: Duration,
    conn: Option<BufReader<TcpStream>>,
}

impl ExternalClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self { endpoint: endpoint.into(), timeout, conn: None }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn connect(&mut self) -> Result<(), BackendError> {
        if self.conn.is_some() {
            return Ok(());
        }
        let addrs = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| BackendError::Transport(format!("cannot resolve {}: {e}", self.endpoint)))?;
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(stream) => {
                    let fail = |e| io_to_backend(&self.endpoint, e);
                    stream.set_read_timeout(Some(self.timeout)).map_err(fail)?;
                    stream.set_write_timeout(Some(self.timeout)).map_err(fail)?;
                    self.conn = Some(BufReader::new(stream));
                    return Ok(());
                }
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) if matches!(e.kind(), ErrorKind::TimedOut) => BackendError::Timeout,
            Some(e) => BackendError::Transport(format!("cannot connect to {}: {e}", self.endpoint)),
            None => BackendError::Transport(format!("{} resolves to no address", self.endpoint)),
        })
    }

    fn exchange(&mut self, line: &str) -> Result<String, BackendError> {
        self.connect()?;
        let endpoint = self.endpoint.clone();
        let conn = self.conn.as_mut().expect("connected");
        conn.get_mut().write_all(line.as_bytes()).map_err(|e| io_to_backend(&endpoint, e))?;
        let mut reply = String::new();
        let n = conn.read_line(&mut reply).map_err(|e| io_to_backend(&endpoint, e))?;
        if n == 0 {
            return Err(BackendError::Transport(format!("{endpoint} closed the connection")));
        }
        Ok(reply)
    }

    pub fn call<T: DeserializeOwned>(&mut self, op: &str, mut payload: Value) -> Result<T, BackendError> {
        payload["op"] = Value::String(op.to_string());
        let mut line = payload.to_string();
        line.push('\n');
        let reply = self.exchange(&line).inspect_err(|_| self.conn = None)?;
        let reply: Reply = serde_json::from_str(&reply).map_err(|e| BackendError::Protocol(e.to_string()))?;
        if !reply.ok {
            return Err(BackendError::Rejected(reply.error.unwrap_or_else(|| "unspecified error".into())));
        }
        serde_json::from_value(reply.result).map_err(|e| BackendError::Protocol(format!("{op}: {e}")))
    }
}

impl Clone for ExternalClient {
    fn clone(&self) -> Self {
        Self::new(self.endpoint.clone(), self.timeout)
    }
}

#[derive(Debug, Clone)]
pub struct ExternalReasoner {
    client: ExternalClient,
}

impl ExternalReasoner {
    pub fn new(client: ExternalClient) -> Self {
        Self { client }
    }
}

impl ReasonerBackend for ExternalReasoner {
    fn backend_id(&self) -> &str {
        self.client.endpoint()
    }

    fn ground(&mut self, prompt: &str, obs: &SceneDescription) -> Result<Vec<RawGroundedItem>, BackendError> {
        self.client.call("ground", json!({ "prompt": prompt, "observation": obs }))
    }

    fn plan(&mut self, prompt: &str, obs: &SceneDescription, library: &[LibraryEntry]) -> Result<RawPlan, BackendError> {
        self.client.call("plan", json!({ "prompt": prompt, "observation": obs, "library": library }))
    }

    fn rank(&mut self, query: &SkillQuery, candidates: &[LibraryEntry]) -> Result<Vec<String>, BackendError> {
        self.client.call("rank", json!({ "query": query, "candidates": candidates }))
    }
}

#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    client: ExternalClient,
}

impl ExternalEvaluator {
    pub fn new(client: ExternalClient) -> Self {
        Self { client }
    }
}

impl QueryTranslator for ExternalEvaluator {
    fn backend_id(&self) -> &str {
        self.client.endpoint()
    }

    fn translate(&mut self, prompt: &str, command: &str, action: &SkillAction) -> Result<VqaQuery, EvalError> {
        Ok(self.client.call("translate", json!({ "prompt": prompt, "command": command, "action": action }))?)
    }
}

impl Assessor for ExternalEvaluator {
    fn backend_id(&self) -> &str {
        self.client.endpoint()
    }

    fn assess(&mut self, scene: &SceneDescription, query: &VqaQuery) -> Result<Assessment, EvalError> {
        Ok(self.client.call("assess", json!({ "scene": scene, "query": query }))?)
    }
}

impl AnswerParser for ExternalEvaluator {
    fn backend_id(&self) -> &str {
        self.client.endpoint()
    }

    fn decode(&mut self, command: &str, query: &VqaQuery, response: &Assessment) -> Result<bool, EvalError> {
        Ok(self.client.call("decode", json!({ "command": command, "query": query, "response": response }))?)
    }
}

/// Evaluator stages all served by one endpoint, each over its own connection.
pub fn external_evaluators(client: &ExternalClient) -> EvaluatorBackends {
    EvaluatorBackends {
        translator: Box::new(ExternalEvaluator::new(client.clone())),
        assessor: Box::new(ExternalEvaluator::new(client.clone())),
        parser: Box::new(ExternalEvaluator::new(client.clone())),
        prompts: PromptSet::default(),
    }
}

#[cfg(test)]
mod tests {
    use std::net::TcpListener;
    use std::sync::Arc;
    use std::thread;

    use super::*;
    use crate::evaluator::{evaluate, OracleAssessor, OracleParser, OracleTranslator};
    use crate::library::SimilarityWeights;
    use crate::planner::{ground_objects, plan_task, OracleReasoner, PlannerConfig, TaskPlan};
    use crate::sim::{describe_scene, spawn_scene, TemplateRegistry};

    /// Serves oracle backends over the wire protocol, one thread per connection.
    fn spawn_oracle_server() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                thread::spawn(move || serve(stream));
            }
        });
        addr
    }

    fn serve(stream: TcpStream) {
        let reg = Arc::new(TemplateRegistry::builtin());
        let mut reasoner = OracleReasoner::new(reg, SimilarityWeights::default(), 0);
        let mut writer = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            let req: Value = serde_json::from_str(&line).unwrap();
            let result: Result<Value, String> = match req["op"].as_str().unwrap() {
                "ground" => reasoner
                    .ground(req["prompt"].as_str().unwrap(), &serde_json::from_value(req["observation"].clone()).unwrap())
                    .map(|v| json!(v))
                    .map_err(|e| e.to_string()),
                "plan" => reasoner
                    .plan(
                        req["prompt"].as_str().unwrap(),
                        &serde_json::from_value(req["observation"].clone()).unwrap(),
                        &serde_json::from_value::<Vec<LibraryEntry>>(req["library"].clone()).unwrap(),
                    )
                    .map(|v| json!(v))
                    .map_err(|e| e.to_string()),
                "rank" => reasoner
                    .rank(
                        &serde_json::from_value(req["query"].clone()).unwrap(),
                        &serde_json::from_value::<Vec<LibraryEntry>>(req["candidates"].clone()).unwrap(),
                    )
                    .map(|v| json!(v))
                    .map_err(|e| e.to_string()),
                "translate" => OracleTranslator
                    .translate(
                        req["prompt"].as_str().unwrap(),
                        req["command"].as_str().unwrap(),
                        &serde_json::from_value(req["action"].clone()).unwrap(),
                    )
                    .map(|v| json!(v))
                    .map_err(|e| e.to_string()),
                "assess" => OracleAssessor::new(0)
                    .assess(
                        &serde_json::from_value(req["scene"].clone()).unwrap(),
                        &serde_json::from_value(req["query"].clone()).unwrap(),
                    )
                    .map(|v| json!(v))
                    .map_err(|e| e.to_string()),
                "decode" => OracleParser
                    .decode(
                        req["command"].as_str().unwrap(),
                        &serde_json::from_value(req["query"].clone()).unwrap(),
                        &serde_json::from_value(req["response"].clone()).unwrap(),
                    )
                    .map(|v| json!(v))
                    .map_err(|e| e.to_string()),
                "garbage" => {
                    writeln!(writer, "not json").unwrap();
                    continue;
                }
                other => Err(format!("unknown op {other}")),
            };
            let reply = match result {
                Ok(v) => json!({ "ok": true, "result": v }),
                Err(e) => json!({ "ok": false, "error": e }),
            };
            writeln!(writer, "{reply}").unwrap();
        }
    }

    fn client(addr: &str) -> ExternalClient {
        ExternalClient::new(addr, Duration::from_secs(5))
    }

    fn plan_with(backend: &mut dyn ReasonerBackend) -> TaskPlan {
        let reg = TemplateRegistry::builtin();
        let world = spawn_scene(&reg, "push_stack", 3).unwrap();
        let obs = describe_scene(&world);
        let prompts = PromptSet::default();
        let scene = ground_objects(backend, &prompts, &obs).unwrap();
        let lib = crate::demos::record_seed_library(&reg, &crate::demos::SCRIPTS, 2, 1).unwrap();
        let mode = reg.get("push_stack").unwrap().mode;
        plan_task(backend, &prompts, &obs, &scene, &lib, mode, &PlannerConfig::default()).unwrap()
    }

    #[test]
    fn remote_reasoner_matches_local_oracle() {
        let addr = spawn_oracle_server();
        let remote = plan_with(&mut ExternalReasoner::new(client(&addr)));
        let local =
            plan_with(&mut OracleReasoner::new(Arc::new(TemplateRegistry::builtin()), SimilarityWeights::default(), 0));
        assert_eq!(remote, local);
    }

    #[test]
    fn remote_evaluator_matches_local_oracle() {
        let addr = spawn_oracle_server();
        let reg = TemplateRegistry::builtin();
        let world = spawn_scene(&reg, "push_block", 2).unwrap();
        let plan = plan_with(&mut OracleReasoner::new(Arc::new(reg.clone()), SimilarityWeights::default(), 0));
        let scene = describe_scene(&world);
        let st = &plan.forward[0];
        let remote = evaluate(&mut external_evaluators(&client(&addr)), &st.description, &st.action, &scene);
        let local = evaluate(&mut EvaluatorBackends::oracle(), &st.description, &st.action, &scene);
        assert!(!remote.flagged, "{:?}", remote.stage_log);
        assert_eq!(remote.value, local.value);
        assert_eq!(remote.stage_log.query, local.stage_log.query);
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().to_string()
        };
        let err = client(&addr).connect().unwrap_err();
        assert!(matches!(err, BackendError::Transport(ref m) if m.contains(&addr)), "{err:?}");
    }

    #[test]
    fn malformed_and_rejected_replies_are_typed() {
        let addr = spawn_oracle_server();
        let mut c = client(&addr);
        let err = c.call::<Value>("garbage", json!({})).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)), "{err:?}");
        let err = c.call::<Value>("nonsense", json!({})).unwrap_err();
        assert_eq!(err, BackendError::Rejected("unknown op nonsense".into()));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let hold = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(500));
            drop(stream);
        });
        let mut c = ExternalClient::new(&addr, Duration::from_millis(100));
        assert_eq!(c.call::<Value>("ground", json!({})).unwrap_err(), BackendError::Timeout);
        hold.join().unwrap();
    }
}
