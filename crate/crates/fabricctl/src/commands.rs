use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use fabric_core::access::{issue_token, verify_token, AccessError, AccessLayer, Claims, QueryRequest, Scope};
use fabric_core::gateway::{ArchiveSource, BatchSource, DirectorySource, Gateway, Record, SubmitOutcome};
use fabric_core::journal::Durability;
use fabric_core::model::{parse_schema, parse_term_proposals, PublishOutcome, SchemaRef};
use fabric_core::pipeline::{
    builtin_registry, emit_discovery_metadata, execute, export, load_pipeline, plan, ExecuteContext, PipelineSpec,
    RunInfo, RunOutcome,
};
use fabric_core::sim::{generate, load_stream, replay, write_stream, GatewayEndpoint, IngestEndpoint, SimConfig};
use fabric_core::store::{KeyHint, Lifecycle, MetadataFilter, PublishRequest, SkipReason};
use fabric_core::study;
use fabric_core::table::Table;
use fabric_core::time::{Clock, SystemClock, Timestamp};
use fabric_core::Fabric;
use fabric_server::{AppState, HttpEndpoint, ServerConfig};
use serde::Serialize;
use serde_json::Value;

use crate::config::Settings;
use crate::{
    CliError, Command, IngestCmd, PipelineCmd, PublishArgs, QueryArgs, SchemaCmd, SimCmd, StoreCmd, StoreQueryArgs,
    StudyCmd, TokenCmd, VocabCmd,
};

/// Wall-clock fields, and references to content embedding one, left out of
/// output unless `--verbose`.
const VOLATILE_KEYS: &[&str] = &[
    "ingest_time",
    "started_at",
    "finished_at",
    "generated_at",
    "proposed_at",
    "at",
    "discovery_metadata_ref",
    "sidecar_checksum",
];

pub struct Ctx<'a> {
    pub settings: &'a Settings,
    pub actor: &'a str,
}

pub struct Output<'a> {
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
    verbose: bool,
}

impl<'a> Output<'a> {
    pub fn new(stdout: &'a mut dyn Write, stderr: &'a mut dyn Write, verbose: bool) -> Self {
        Output {
            stdout,
            stderr,
            verbose,
        }
    }

    fn line(&mut self, text: impl std::fmt::Display) -> Result<(), CliError> {
        writeln!(self.stdout, "{text}").map_err(|e| CliError::io(format!("stdout: {e}")))
    }

    fn note(&mut self, text: impl std::fmt::Display) {
        let _ = writeln!(self.stderr, "{text}");
    }

    fn value<T: Serialize>(&self, data: &T) -> Result<Value, CliError> {
        let mut value = serde_json::to_value(data).map_err(|e| CliError::io(format!("encoding output: {e}")))?;
        if !self.verbose {
            strip_volatile(&mut value);
        }
        Ok(value)
    }

    fn json<T: Serialize>(&mut self, data: &T) -> Result<(), CliError> {
        let value = self.value(data)?;
        let text = serde_json::to_string_pretty(&value).expect("values always encode");
        self.line(text)
    }

    fn json_line<T: Serialize>(&mut self, data: &T) -> Result<(), CliError> {
        let value = self.value(data)?;
        self.line(value)
    }
}

fn strip_volatile(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.retain(|k, _| !VOLATILE_KEYS.contains(&k.as_str()));
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(format!("STORAGE_IO: reading {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_file(path)?).map_err(|_| CliError::domain(format!("{} is not UTF-8", path.display())))
}

fn open(ctx: &Ctx<'_>) -> Result<Fabric, CliError> {
    Fabric::open(ctx.settings.store()?, Durability::Sync).map_err(|e| CliError::coded(e.code(), e))
}

fn load_spec(path: &Path) -> Result<PipelineSpec, CliError> {
    load_pipeline(&read_text(path)?, &builtin_registry()).map_err(|e| CliError::coded(e.code(), e))
}

fn parse_schema_ref(s: &str) -> Result<SchemaRef, CliError> {
    let (id, version) = s
        .split_once("@v")
        .ok_or_else(|| CliError::usage(format!("schema reference `{s}` must look like id@vN")))?;
    let version = version
        .parse()
        .map_err(|_| CliError::usage(format!("schema reference `{s}` has a bad version")))?;
    Ok(SchemaRef::new(id, version))
}

pub fn dispatch(command: Command, ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    let clock = SystemClock;
    match command {
        Command::Study(StudyCmd::Install) => {
            let fabric = open(ctx)?;
            study::install(&fabric, ctx.actor, clock.now()).map_err(|e| CliError::coded(e.code(), e))?;
            for r in fabric.schemas.list() {
                out.line(format!("ready {r}"))?;
            }
            Ok(0)
        }
        Command::Schema(cmd) => schema(cmd, ctx, out),
        Command::Vocab(cmd) => vocab(cmd, ctx, out, clock.now()),
        Command::Ingest(cmd) => ingest(cmd, ctx, out),
        Command::Store(cmd) => store(cmd, ctx, out),
        Command::Pipeline(cmd) => pipeline(cmd, ctx, out),
        Command::Publish(args) => publish(args, ctx, out, clock.now()),
        Command::Query(args) => query(args, ctx, out, clock.now()),
        Command::Sim(cmd) => sim(cmd, ctx, out),
        Command::Serve(_) => serve(ctx, out),
        Command::Token(cmd) => token(cmd, ctx, out, clock.now()),
    }
}

fn schema(cmd: SchemaCmd, ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    let fabric = open(ctx)?;
    match cmd {
        SchemaCmd::Publish { file } => {
            let schema = parse_schema(&read_text(&file)?).map_err(|e| CliError::coded(e.code(), e))?;
            let schema_ref = schema.schema_ref();
            let outcome = fabric
                .schemas
                .publish(schema, &fabric.vocabulary)
                .map_err(|e| CliError::coded(e.code(), e))?;
            match outcome {
                PublishOutcome::Published => out.line(format!("published {schema_ref}"))?,
                PublishOutcome::AlreadyPublished => out.line(format!("unchanged {schema_ref}"))?,
            }
        }
        SchemaCmd::Show { schema_id, version } => {
            let found = fabric
                .schemas
                .list()
                .into_iter()
                .filter(|r| r.schema_id == schema_id && version.is_none_or(|v| r.version == v))
                .max_by_key(|r| r.version)
                .and_then(|r| fabric.schemas.get(&r))
                .ok_or_else(|| CliError::domain(format!("SCHEMA_NOT_FOUND: {schema_id}")))?;
            out.line(found.to_document())?;
        }
        SchemaCmd::List => {
            for r in fabric.schemas.list() {
                out.line(r)?;
            }
        }
    }
    Ok(0)
}

fn vocab(cmd: VocabCmd, ctx: &Ctx<'_>, out: &mut Output<'_>, now: Timestamp) -> Result<i32, CliError> {
    let fabric = open(ctx)?;
    let coded = |e: fabric_core::model::VocabError| CliError::coded(e.code(), e);
    match cmd {
        VocabCmd::Propose { file } => {
            for proposal in parse_term_proposals(&read_text(&file)?).map_err(coded)? {
                let name = proposal.canonical_name.clone();
                fabric
                    .vocabulary
                    .register(proposal.into_term(ctx.actor, now))
                    .map_err(coded)?;
                out.line(format!("proposed {name}"))?;
            }
        }
        VocabCmd::Accept { name } => out.json(&fabric.vocabulary.accept(&name, ctx.actor, now).map_err(coded)?)?,
        VocabCmd::Reject { name } => out.json(&fabric.vocabulary.reject(&name, ctx.actor, now).map_err(coded)?)?,
        VocabCmd::List => out.json(&fabric.vocabulary.list())?,
    }
    Ok(0)
}

fn ingest(cmd: IngestCmd, ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    let fabric = open(ctx)?;
    let clock = SystemClock;
    let gateway = Gateway::new(&fabric, &clock);
    match cmd {
        IngestCmd::Record {
            file,
            blob,
            content_type,
        } => {
            let record = Record::from_json(&read_file(&file)?).map_err(|e| CliError::coded(e.code(), e))?;
            let outcome = match blob {
                Some(path) => {
                    let content = read_file(&path)?;
                    gateway.submit(&record, Some((&content, &content_type)))
                }
                None => gateway.submit_realtime(&record),
            }
            .map_err(|e| CliError::coded(e.code(), e))?;
            out.json(&outcome)?;
            Ok(i32::from(matches!(outcome, SubmitOutcome::Rejected { .. })))
        }
        IngestCmd::Batch { path } => {
            let source: Box<dyn BatchSource> = if path.is_dir() {
                Box::new(DirectorySource::new(&path))
            } else {
                let bytes = read_file(&path)?;
                Box::new(ArchiveSource::from_tar(&bytes).map_err(|e| {
                    CliError::domain(format!(
                        "MALFORMED_MANIFEST: {} is not a tar archive: {e}",
                        path.display()
                    ))
                })?)
            };
            let report = gateway
                .submit_batch(&*source)
                .map_err(|e| CliError::coded(e.code(), e))?;
            out.json(&report)?;
            Ok(i32::from(report.totals.rejected > 0))
        }
    }
}

fn store(cmd: StoreCmd, ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    let fabric = open(ctx)?;
    match cmd {
        StoreCmd::Promote { all_valid, entry_ids } => {
            let ids = if all_valid {
                fabric
                    .store
                    .query_metadata(&MetadataFilter {
                        lifecycle: Some(Lifecycle::Staging),
                        ..Default::default()
                    })
                    .into_iter()
                    .filter(|e| e.validation.is_valid())
                    .map(|e| e.entry_id)
                    .collect()
            } else if entry_ids.is_empty() {
                return Err(CliError::usage("pass entry ids or --all-valid"));
            } else {
                entry_ids
            };
            let report = fabric.store.promote(&ids).map_err(|e| CliError::coded(e.code(), e))?;
            out.json(&report)?;
            let refused = report.skipped.iter().any(|s| s.reason != SkipReason::AlreadyProduction);
            Ok(i32::from(refused))
        }
        StoreCmd::Audit => {
            let report = fabric.audit();
            for v in &report.violations {
                out.json_line(v)?;
            }
            out.line(format!("{} violations", report.violations.len()))?;
            Ok(i32::from(!report.is_clean()))
        }
        StoreCmd::Query(StoreQueryArgs {
            study,
            participant,
            task,
            lifecycle,
            from,
            to,
        }) => {
            let filter = MetadataFilter {
                study_id: study,
                participant_id: participant,
                task_id: task,
                lifecycle,
                from,
                to,
            };
            for entry in fabric.store.query_metadata(&filter) {
                out.json_line(&entry)?;
            }
            Ok(0)
        }
    }
}

/// `instance.param=value`; the value is JSON when it parses, else a string.
fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{raw}` must look like instance.param=value")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

fn pipeline(cmd: PipelineCmd, ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    match cmd {
        PipelineCmd::Validate { file } => {
            let spec = load_spec(&file)?;
            out.line(format!("valid {} v{}", spec.pipeline_id, spec.version))?;
            Ok(0)
        }
        PipelineCmd::Plan { file } => {
            out.json(&plan(&load_spec(&file)?))?;
            Ok(0)
        }
        PipelineCmd::Export { file } => {
            out.line(export(&load_spec(&file)?).to_document())?;
            Ok(0)
        }
        PipelineCmd::Run {
            file,
            study,
            overrides,
            dataset_id,
        } => {
            let nodes = builtin_registry();
            let spec = load_spec(&file)?;
            let overrides = overrides
                .iter()
                .map(|o| parse_override(o))
                .collect::<Result<BTreeMap<_, _>, _>>()?;
            let fabric = open(ctx)?;
            let clock = SystemClock;
            let run = execute(
                &spec,
                &plan(&spec),
                &ExecuteContext {
                    fabric: &fabric,
                    nodes: &nodes,
                    environment: &ctx.settings.environment,
                    study_id: &study,
                    overrides,
                    dataset_id,
                    clock: &clock,
                },
            )
            .map_err(|e| CliError::coded(e.code(), e))?;
            out.json(&run)?;
            if let Some(failure) = &run.failure {
                out.note(format!("{}: {}", failure.code, failure.message));
            }
            Ok(i32::from(run.outcome != RunOutcome::Succeeded))
        }
    }
}

/// Publishes a CSV produced by a run. The rows must match a valid CODE
/// validation recorded for that run; the sidecar is regenerated.
fn publish(args: PublishArgs, ctx: &Ctx<'_>, out: &mut Output<'_>, now: Timestamp) -> Result<i32, CliError> {
    let fabric = open(ctx)?;
    let run = fabric
        .store
        .run(&args.run)
        .ok_or_else(|| CliError::domain(format!("NOT_FOUND: no run `{}`", args.run)))?;
    let candidates: Vec<SchemaRef> = match &args.schema {
        Some(s) => vec![parse_schema_ref(s)?],
        None => {
            let mut refs: Vec<SchemaRef> = fabric
                .store
                .code_validations()
                .into_iter()
                .filter(|v| v.run_id == run.run_id)
                .map(|v| v.code_schema_ref)
                .collect();
            refs.dedup();
            refs
        }
    };
    if candidates.is_empty() {
        return Err(CliError::domain(format!(
            "CODE_NOT_VALIDATED: run {} has no CODE validation records",
            run.run_id
        )));
    }
    let csv = read_file(&args.csv)?;
    let mut chosen = None;
    for schema_ref in &candidates {
        let schema = fabric
            .schemas
            .code(schema_ref)
            .map_err(|e| CliError::coded(e.code(), e))?;
        let rows = Table::from_csv_typed(&csv, &|name| schema.field(name).map(|f| f.kind))
            .map_err(|e| CliError::domain(format!("TYPE_MISMATCH: {}: {e}", args.csv.display())))?;
        let validated = fabric.store.is_code_validated(&run.run_id, schema_ref, &rows);
        if validated || chosen.is_none() {
            chosen = Some((schema, rows));
        }
        if validated {
            break;
        }
    }
    let (schema, rows) = chosen.expect("at least one candidate");
    let environment = &ctx.settings.environment;
    let info = RunInfo {
        run_id: &run.run_id,
        pipeline_id: &run.pipeline_id,
        pipeline_version: run.pipeline_version,
        environment,
        study_id: &run.study_id,
        generated_at: now,
    };
    let sidecar = emit_discovery_metadata(&info, &args.dataset_id, &schema, &rows).to_document();
    let store_err = |e: fabric_core::store::StoreError| CliError::coded(e.code(), e);
    let schema_ref = schema.schema_ref();
    let request = PublishRequest {
        dataset_id: &args.dataset_id,
        environment,
        study_id: &run.study_id,
        code_schema_ref: &schema_ref,
        rows: &rows,
        run_id: &run.run_id,
        sidecar: sidecar.as_bytes(),
        generated_at: now,
        source_entries: &[],
    };
    if !fabric.store.is_code_validated(&run.run_id, &schema_ref, &rows) {
        // Let the store produce the refusal.
        fabric.store.publish_outbound(&request).map_err(store_err)?;
    }
    fabric
        .store
        .put_object(
            sidecar.as_bytes(),
            "application/json",
            &KeyHint::Sidecar {
                environment: environment.clone(),
                dataset_id: args.dataset_id.clone(),
            },
        )
        .map_err(store_err)?;
    let manifest = fabric.store.publish_outbound(&request).map_err(store_err)?;
    out.json(&manifest)?;
    Ok(0)
}

fn query(args: QueryArgs, ctx: &Ctx<'_>, out: &mut Output<'_>, now: Timestamp) -> Result<i32, CliError> {
    let key = ctx.settings.key()?;
    let coded = |e: AccessError| CliError::coded(e.code(), e);
    let token = verify_token(&args.token, &key, now).map_err(|e| coded(e.into()))?;
    let fabric = open(ctx)?;
    let request = QueryRequest {
        dataset_id: args.dataset,
        environment: args.in_environment,
        field: args.field,
        from: args.from,
        to: args.to,
        group_by: args.group_by,
        aggregate: args.aggregate,
    };
    let series = AccessLayer::new(&fabric.store)
        .query_series(&token, &request)
        .map_err(coded)?;
    out.json(&series)?;
    Ok(0)
}

fn sim(cmd: SimCmd, ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    match cmd {
        SimCmd::Generate {
            seed,
            participants,
            days,
            corruption_rate,
            out: dir,
        } => {
            let (stream, ledger) = generate(&SimConfig::new(seed, participants, days, corruption_rate))
                .map_err(|e| CliError::coded(e.code(), e))?;
            write_stream(&dir, &stream, &ledger).map_err(|e| CliError::coded(e.code(), e))?;
            out.json(&serde_json::json!({
                "records": stream.records.len(),
                "corrupted": ledger.corrupted_count(),
                "expected": ledger.expected_totals(),
            }))?;
            Ok(0)
        }
        SimCmd::Replay {
            dir,
            mode,
            url,
            token,
            check,
        } => {
            let (stream, ledger) = load_stream(&dir).map_err(|e| CliError::coded(e.code(), e))?;
            let report = match url {
                Some(url) => {
                    let endpoint = HttpEndpoint::new(&url, token.as_deref().unwrap_or_default())
                        .map_err(|e| CliError::io(e.to_string()))?;
                    replay_with(&stream, mode, &endpoint)?
                }
                None => {
                    let fabric = open(ctx)?;
                    let clock = SystemClock;
                    replay_with(&stream, mode, &GatewayEndpoint(Gateway::new(&fabric, &clock)))?
                }
            };
            let mut summary = serde_json::json!({
                "mode": report.mode,
                "requests": report.requests,
                "totals": report.totals,
            });
            let mut code = 0;
            if check {
                let ledger = ledger.ok_or_else(|| CliError::usage(format!("{} has no ledger.json", dir.display())))?;
                let expected = ledger.expected_totals();
                let matches = expected == report.totals;
                summary["check"] = serde_json::json!({ "expected": expected, "matches": matches });
                if !matches {
                    out.note("replay totals differ from the ledger");
                    code = 1;
                }
            }
            out.json(&summary)?;
            Ok(code)
        }
    }
}

fn replay_with(
    stream: &fabric_core::sim::SimStream,
    mode: fabric_core::sim::ReplayMode,
    endpoint: &dyn IngestEndpoint,
) -> Result<fabric_core::sim::ReplayReport, CliError> {
    replay(stream, mode, endpoint).map_err(|e| CliError::coded(e.code(), e))
}

fn serve(ctx: &Ctx<'_>, out: &mut Output<'_>) -> Result<i32, CliError> {
    let addr: SocketAddr = ctx
        .settings
        .addr
        .parse()
        .map_err(|e| CliError::usage(format!("bad address `{}`: {e}", ctx.settings.addr)))?;
    let key = ctx.settings.key()?;
    let fabric = Arc::new(open(ctx)?);
    let state = AppState::new(
        fabric,
        ServerConfig {
            environment: ctx.settings.environment.clone(),
            key,
        },
        Arc::new(SystemClock),
    );
    out.note(format!("serving on {addr}"));
    fabric_server::serve_forever(addr, state).map_err(|e| CliError::io(format!("TRANSPORT_ERROR: {e}")))?;
    Ok(0)
}

fn token(cmd: TokenCmd, ctx: &Ctx<'_>, out: &mut Output<'_>, now: Timestamp) -> Result<i32, CliError> {
    let TokenCmd::Issue {
        subject,
        scopes,
        expires,
        ttl_seconds,
    } = cmd;
    let scopes = scopes
        .iter()
        .map(|s| {
            s.split_once(':')
                .map(|(env, study)| Scope::new(env, study))
                .ok_or_else(|| CliError::usage(format!("scope `{s}` must look like environment:study")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let exp = expires.unwrap_or_else(|| now.plus_seconds(ttl_seconds));
    let key = ctx.settings.key()?;
    out.line(issue_token(
        &Claims {
            sub: subject,
            exp: exp.unix_seconds(),
            scopes,
        },
        &key,
    ))?;
    Ok(0)
}
