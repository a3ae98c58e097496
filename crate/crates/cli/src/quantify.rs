use std::path::{Path, PathBuf};

use ndarray::Axis;
use prefnet::dataio::{AttributeKind, AttributeSchema, Selection};
use prefnet::quantities::{self as q, Benefit, Bins, GroupValue};
use prefnet::PreferenceMatrix;

use crate::error::CliError;
use crate::fit::{create_dir, load_run, FittedRun};
use crate::manifest::RunManifest;
use crate::{QuantifyArgs, Quantity, Threads};

const SUMMARY_ROW: &str = "summary";

pub fn run(args: &QuantifyArgs, threads: &Threads) -> Result<(), CliError> {
    let fitted = load_run(&args.out)?;
    let dir = args.out.join("quantities");
    create_dir(&dir)?;
    let name = args.quantity.name();
    let bins = match &args.by {
        Some(cov) => Some(Bins::by_covariate(&fitted.ds, cov)?),
        None => None,
    };
    let seed = args.seed.unwrap_or(fitted.config.seed);
    let mut manifest = RunManifest::new(
        &format!("quantify {name}"),
        threads.count,
        serde_json::json!({
            "quantity": name,
            "by": args.by,
            "level": args.level,
            "tol": args.tol,
            "num": args.num,
            "den": args.den,
            "eps": args.eps,
            "penalty": args.penalty,
            "benefit": args.benefit,
            "profile_a": args.profile_a,
            "profile_b": args.profile_b,
            "brackets": args.brackets,
            "midpoints": args.midpoints,
            "set": args.set,
            "draws": args.draws,
        }),
    );
    manifest.seeds.insert("ame".into(), seed);
    for input in &fitted.manifest.inputs {
        manifest.input(&input.path)?;
    }
    manifest.input(&args.out.join(crate::fit::PREFERENCES_FILE))?;

    let ctx = Context {
        fitted: &fitted,
        args,
        dir: &dir,
        bins: bins.as_ref(),
        threads,
        seed,
    };
    let files = manifest.stage(name, || ctx.compute())?;
    manifest.finish(&dir, &format!("{name}.manifest.json"), &files)?;
    Ok(())
}

struct Context<'a> {
    fitted: &'a FittedRun,
    args: &'a QuantifyArgs,
    dir: &'a Path,
    bins: Option<&'a Bins>,
    threads: &'a Threads,
    seed: u64,
}

impl Context<'_> {
    fn schema(&self) -> &AttributeSchema {
        &self.fitted.schema
    }

    fn pm(&self) -> &PreferenceMatrix {
        &self.fitted.pm
    }

    fn file(&self, suffix: &str) -> PathBuf {
        self.dir
            .join(format!("{}{suffix}.csv", self.args.quantity.name()))
    }

    fn by_file(&self) -> PathBuf {
        let cov = self.bins.map_or("", |b| b.covariate.as_str());
        self.file(&format!("_by_{cov}"))
    }

    fn compute(&self) -> Result<Vec<PathBuf>, CliError> {
        match self.args.quantity {
            Quantity::Ame => self.ame(),
            Quantity::Polarization => self.polarization(),
            Quantity::Importance => self.importance(),
            Quantity::Mrs => self.mrs(),
            Quantity::Compdiff => self.compdiff(),
            Quantity::Chooseprob => self.chooseprob(),
            Quantity::Majority => self.majority(),
            Quantity::Slope => self.slope(),
            Quantity::Sensitivity => self.sensitivity(),
        }
    }

    fn levels(&self) -> Result<Vec<usize>, CliError> {
        if self.args.level.trim() == "all" {
            return Ok((0..self.schema().width()).collect());
        }
        level_list(self.schema(), &split(&self.args.level))
    }

    fn ame(&self) -> Result<Vec<PathBuf>, CliError> {
        if self.bins.is_some() {
            return Err(CliError::usage("ame does not support --by"));
        }
        let opts = q::AmeOptions {
            draws: self.args.draws,
            seed: self.seed,
            ..Default::default()
        };
        let lpm = q::lpm_amce(&self.fitted.ds)?;
        let mut rows = Vec::new();
        for k in self.levels()? {
            let a = q::ame(self.pm(), &self.fitted.ds, k, &opts, self.threads.exec)?;
            rows.push(vec![
                a.column,
                a.ame.to_string(),
                a.mc_se.to_string(),
                a.exact.to_string(),
                lpm[k].to_string(),
            ]);
        }
        let path = self.file("");
        q::write_table(&path, &["level", "ame", "mc_se", "exact", "lpm_amce"], rows)?;
        Ok(vec![path])
    }

    fn polarization(&self) -> Result<Vec<PathBuf>, CliError> {
        let levels = self.levels()?;
        let names = self.schema().column_names();
        let header = ["level", "frac_positive", "frac_negative", "frac_zero"];
        let row = |pm: &PreferenceMatrix, k: usize| -> Result<Vec<String>, CliError> {
            let p = q::polarization(pm, k, self.args.tol)?;
            Ok(vec![
                names[k].clone(),
                p.frac_positive.to_string(),
                p.frac_negative.to_string(),
                p.frac_zero.to_string(),
            ])
        };
        let rows = levels
            .iter()
            .map(|&k| row(self.pm(), k))
            .collect::<Result<Vec<_>, _>>()?;
        let path = self.file("");
        q::write_table(&path, &header, rows)?;
        let mut files = vec![path];
        if let Some(bins) = self.bins {
            let mut rows = Vec::new();
            for (g, group) in bins.names.iter().enumerate() {
                let members = bins.members(g);
                if members.is_empty() {
                    continue;
                }
                let sub = PreferenceMatrix::from_beta(self.pm().beta.select(Axis(0), &members));
                for &k in &levels {
                    let mut r = vec![group.clone(), members.len().to_string()];
                    r.extend(row(&sub, k)?);
                    rows.push(r);
                }
            }
            let path = self.by_file();
            q::write_table(
                &path,
                &[
                    "group",
                    "n",
                    "level",
                    "frac_positive",
                    "frac_negative",
                    "frac_zero",
                ],
                rows,
            )?;
            files.push(path);
        }
        Ok(files)
    }

    fn importance(&self) -> Result<Vec<PathBuf>, CliError> {
        let shares = q::importance_shares(self.pm(), &self.fitted.ds)?;
        let mut header = vec!["respondent_id"];
        header.extend(shares.attributes.iter().map(String::as_str));
        let ids = self.fitted.ds.respondent_ids();
        let mut rows: Vec<Vec<String>> = ids
            .iter()
            .zip(shares.shares.rows())
            .map(|(id, r)| {
                std::iter::once(id.clone())
                    .chain(r.iter().map(f64::to_string))
                    .collect()
            })
            .collect();
        rows.push(
            std::iter::once(SUMMARY_ROW.to_string())
                .chain(shares.mean_shares().iter().map(f64::to_string))
                .collect(),
        );
        let path = self.file("");
        q::write_table(&path, &header, rows)?;
        let mut files = vec![path];
        if let Some(bins) = self.bins {
            let per_attr: Vec<Vec<GroupValue>> = shares
                .shares
                .columns()
                .into_iter()
                .map(|c| q::group_means(&c.to_vec(), bins))
                .collect();
            let mut header = vec!["group", "n"];
            header.extend(shares.attributes.iter().map(String::as_str));
            let rows = (0..bins.names.len()).map(|g| {
                let mut r = vec![bins.names[g].clone(), per_attr[0][g].n.to_string()];
                r.extend(per_attr.iter().map(|a| a[g].value.to_string()));
                r
            });
            let path = self.by_file();
            q::write_table(&path, &header, rows)?;
            files.push(path);
        }
        Ok(files)
    }

    fn mrs(&self) -> Result<Vec<PathBuf>, CliError> {
        let (Some(num), Some(den)) = (&self.args.num, &self.args.den) else {
            return Err(CliError::usage("mrs needs --num and --den"));
        };
        let j = q::column(self.schema(), num)?;
        let k = q::column(self.schema(), den)?;
        let m = q::mrs(self.pm(), j, k, self.args.eps)?;
        let header = [
            "respondent_id",
            "mrs",
            "median_ratio",
            "ratio_of_means",
            "undefined",
        ];
        let mut rows: Vec<Vec<String>> = self
            .fitted
            .ds
            .respondent_ids()
            .iter()
            .zip(&m.ratios)
            .map(|(id, r)| {
                vec![
                    id.clone(),
                    r.map_or(String::new(), |v| v.to_string()),
                    String::new(),
                    String::new(),
                    String::new(),
                ]
            })
            .collect();
        rows.push(vec![
            SUMMARY_ROW.into(),
            m.mean_ratio.to_string(),
            m.median_ratio.to_string(),
            m.ratio_of_means.to_string(),
            m.undefined.to_string(),
        ]);
        let path = self.file("");
        q::write_table(&path, &header, rows)?;
        self.with_groups(path, &m.values())
    }

    fn compdiff(&self) -> Result<Vec<PathBuf>, CliError> {
        let Some(penalty) = &self.args.penalty else {
            return Err(CliError::usage("compdiff needs --penalty"));
        };
        let j = q::column(self.schema(), penalty)?;
        let benefit = parse_benefit(self.schema(), &self.args.benefit)?;
        let c = q::compensating_differential(self.pm(), j, &benefit, self.bins)?;
        let ind: Vec<f64> = c.holds.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        let path = self.file("");
        self.per_respondent(&path, "holds", &ind, c.fraction)?;
        let mut files = vec![path];
        if self.bins.is_some() {
            let path = self.by_file();
            q::write_groups(&path, &c.by_group)?;
            files.push(path);
        }
        Ok(files)
    }

    fn profiles(&self) -> Result<(Vec<Selection>, Vec<Selection>), CliError> {
        let read = |flag: &str, p: &Option<PathBuf>| -> Result<Vec<Selection>, CliError> {
            let p = p.as_ref().ok_or_else(|| {
                CliError::usage(format!("{} needs {flag}", self.args.quantity.name()))
            })?;
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            Ok(self.schema().profile_from_json(&value)?)
        };
        Ok((
            read("--profile-a", &self.args.profile_a)?,
            read("--profile-b", &self.args.profile_b)?,
        ))
    }

    fn chooseprob(&self) -> Result<Vec<PathBuf>, CliError> {
        let (a, b) = self.profiles()?;
        let c = q::choice_probability(self.pm(), self.schema(), &a, &b, self.bins)?;
        let header = ["respondent_id", "probability", "share_above_half"];
        let mut rows: Vec<Vec<String>> = self
            .fitted
            .ds
            .respondent_ids()
            .iter()
            .zip(&c.probabilities)
            .map(|(id, p)| vec![id.clone(), p.to_string(), String::new()])
            .collect();
        rows.push(vec![
            SUMMARY_ROW.into(),
            c.mean.to_string(),
            c.share_above_half.to_string(),
        ]);
        let path = self.file("");
        q::write_table(&path, &header, rows)?;
        let mut files = vec![path];
        if self.bins.is_some() {
            let path = self.by_file();
            q::write_groups(&path, &c.by_group)?;
            files.push(path);
        }
        Ok(files)
    }

    fn majority(&self) -> Result<Vec<PathBuf>, CliError> {
        let (a, b) = self.profiles()?;
        let header = ["group", "n", "frac_positive", "frac_negative", "frac_ties"];
        let row = |group: &str, pm: &PreferenceMatrix| -> Result<Vec<String>, CliError> {
            let m = q::majority_preference(pm, self.schema(), &a, &b)?;
            Ok(vec![
                group.to_string(),
                pm.n_respondents().to_string(),
                m.frac_positive.to_string(),
                m.frac_negative.to_string(),
                m.frac_ties.to_string(),
            ])
        };
        let mut rows = vec![row("all", self.pm())?];
        if let Some(bins) = self.bins {
            for (g, group) in bins.names.iter().enumerate() {
                let members = bins.members(g);
                if !members.is_empty() {
                    let sub = PreferenceMatrix::from_beta(self.pm().beta.select(Axis(0), &members));
                    rows.push(row(group, &sub)?);
                }
            }
        }
        let path = self.file("");
        q::write_table(&path, &header, rows)?;
        Ok(vec![path])
    }

    fn slope(&self) -> Result<Vec<PathBuf>, CliError> {
        let brackets = self
            .args
            .brackets
            .iter()
            .map(|b| bracket(self.schema(), b))
            .collect::<Result<Vec<_>, _>>()?;
        let p = q::progressivity_slope(self.pm(), &brackets, &self.args.midpoints)?;
        let header = [
            "respondent_id",
            "slope",
            "frac_positive",
            "frac_top_above_bottom",
        ];
        let mut rows: Vec<Vec<String>> = self
            .fitted
            .ds
            .respondent_ids()
            .iter()
            .zip(&p.slopes)
            .map(|(id, s)| vec![id.clone(), s.to_string(), String::new(), String::new()])
            .collect();
        rows.push(vec![
            SUMMARY_ROW.into(),
            p.mean_slope.to_string(),
            p.frac_positive.to_string(),
            p.frac_top_above_bottom.to_string(),
        ]);
        let path = self.file("");
        q::write_table(&path, &header, rows)?;
        self.with_groups(path, &p.slopes)
    }

    fn sensitivity(&self) -> Result<Vec<PathBuf>, CliError> {
        let set = level_list(self.schema(), &self.args.set)?;
        let values = q::sensitivity_index(self.pm(), &set)?;
        let path = self.file("");
        self.per_respondent(&path, "index", &values, mean(&values))?;
        self.with_groups(path, &values)
    }

    /// `respondent_id, <name>` rows followed by a summary row.
    fn per_respondent(
        &self,
        path: &Path,
        name: &str,
        values: &[f64],
        summary: f64,
    ) -> Result<(), CliError> {
        let mut rows: Vec<Vec<String>> = self
            .fitted
            .ds
            .respondent_ids()
            .iter()
            .zip(values)
            .map(|(id, v)| vec![id.clone(), v.to_string()])
            .collect();
        rows.push(vec![SUMMARY_ROW.into(), summary.to_string()]);
        Ok(q::write_table(path, &["respondent_id", name], rows)?)
    }

    fn with_groups(&self, path: PathBuf, values: &[f64]) -> Result<Vec<PathBuf>, CliError> {
        let mut files = vec![path];
        if let Some(bins) = self.bins {
            let path = self.by_file();
            q::write_groups(&path, &q::group_means(values, bins))?;
            files.push(path);
        }
        Ok(files)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn split(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn level_list(schema: &AttributeSchema, names: &[String]) -> Result<Vec<usize>, CliError> {
    names.iter().map(|n| Ok(q::column(schema, n)?)).collect()
}

/// `attr:level` to a design column, `None` for the reference level.
fn bracket(schema: &AttributeSchema, name: &str) -> Result<Option<usize>, CliError> {
    if let Some(k) = schema.column_index(name) {
        return Ok(Some(k));
    }
    let (attr, level) = name.split_once(':').ok_or_else(|| {
        CliError::usage(format!("bracket `{name}` is not of the form attr:level"))
    })?;
    let a = schema
        .attribute_index(attr)
        .ok_or_else(|| CliError::usage(format!("unknown attribute `{attr}`")))?;
    let l = schema.level_index(a, level)?;
    match &schema.attributes()[a].kind {
        AttributeKind::Categorical { reference, .. } if *reference == l => Ok(None),
        _ => Err(CliError::usage(format!("unknown level `{name}`"))),
    }
}

/// `none`, `LEVEL`, `max:L1,L2`, or a sum of `W*LEVEL` / `W*|LEVEL|` terms.
pub fn parse_benefit(schema: &AttributeSchema, spec: &str) -> Result<Benefit, CliError> {
    let spec = spec.trim();
    if spec == "none" {
        return Ok(Benefit::None);
    }
    if let Some(rest) = spec.strip_prefix("max:") {
        return Ok(Benefit::MaxOf(level_list(schema, &split(rest))?));
    }
    if let Some(k) = schema.column_index(spec) {
        return Ok(Benefit::Level(k));
    }
    let mut terms = Vec::new();
    for term in spec.split('+').map(str::trim) {
        let (w, level) = match term.split_once('*') {
            Some((w, l)) => (
                w.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::usage(format!("bad weight in `{term}`")))?,
                l.trim(),
            ),
            None => (1.0, term),
        };
        let (level, abs) = match level.strip_prefix('|').and_then(|l| l.strip_suffix('|')) {
            Some(inner) => (inner, true),
            None => (level, false),
        };
        terms.push((q::column(schema, level)?, w, abs));
    }
    Ok(Benefit::Weighted(terms))
}
