//! Text form of a genotype.
//!
//! ```text
//! degas-genotype v1
//! stages 3 n 1 base 4 latent 64
//! node u1 <- stem : up deconv4
//! node n1 <- u1 : normal sep_conv3x3
//! node u2 <- n1 : up deconv4 ; res u1 : nn_conv3
//! # config 0123456789abcdef seed 7
//! ```
//!
//! The trailing `# config` line is optional.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::search_space::catalog::{NORMAL_OPS, UPSAMPLE_OPS};
use crate::search_space::{Genotype, GenotypeNode, OpClass, Provenance, ResidualChoice};

pub const HEADER: &str = "degas-genotype v1";

fn class_token(c: OpClass) -> &'static str {
    match c {
        OpClass::Normal => "normal",
        OpClass::Upsample => "up",
        OpClass::Zero => "zero",
    }
}

pub fn serialize_genotype(g: &Genotype) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(
        s,
        "stages {} n {} base {} latent {}",
        g.stages, g.n, g.base, g.latent_dim
    );
    for node in &g.nodes {
        let _ = write!(
            s,
            "node {} <- {} : {} {}",
            node.id,
            node.source,
            class_token(node.class),
            node.op
        );
        if let Some(r) = &node.residual {
            let _ = write!(s, " ; res {} : {}", r.source, r.op);
        }
        s.push('\n');
    }
    if let Some(p) = &g.provenance {
        let _ = writeln!(s, "# config {} seed {}", p.config_hash, p.seed);
    }
    s
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::GenotypeParse { line, msg: msg.into() }
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| perr(line, format!("{what} must be a non-negative integer, got `{tok}`")))
}

fn check_op(name: &str, class: OpClass, line: usize) -> Result<()> {
    let ok = match class {
        OpClass::Normal => NORMAL_OPS.contains(&name),
        OpClass::Upsample => UPSAMPLE_OPS.contains(&name),
        OpClass::Zero => false,
    };
    if ok {
        Ok(())
    } else {
        Err(perr(
            line,
            format!("unknown {} op `{name}`", class_token(class)),
        ))
    }
}

fn parse_node(body: &str, line: usize) -> Result<GenotypeNode> {
    let (main, res) = match body.split_once(';') {
        Some((m, r)) => (m, Some(r)),
        None => (body, None),
    };
    let t: Vec<&str> = main.split_whitespace().collect();
    let [kw, id, arrow, src, colon, class, op] = t[..] else {
        return Err(perr(line, "expected `node <id> <- <src> : <class> <op>`"));
    };
    if kw != "node" || arrow != "<-" || colon != ":" {
        return Err(perr(line, "expected `node <id> <- <src> : <class> <op>`"));
    }
    let class = match class {
        "up" => OpClass::Upsample,
        "normal" => OpClass::Normal,
        other => return Err(perr(line, format!("unknown class `{other}` (up, normal)"))),
    };
    check_op(op, class, line)?;
    let residual = match res {
        None => None,
        Some(r) => {
            let t: Vec<&str> = r.split_whitespace().collect();
            let ["res", rsrc, ":", rop] = t[..] else {
                return Err(perr(line, "expected `; res <src> : <op>`"));
            };
            check_op(rop, OpClass::Upsample, line)?;
            Some(ResidualChoice {
                source: rsrc.to_string(),
                op: rop.to_string(),
            })
        }
    };
    Ok(GenotypeNode {
        id: id.to_string(),
        source: src.to_string(),
        class,
        op: op.to_string(),
        residual,
    })
}

pub fn parse_genotype(text: &str) -> Result<Genotype> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        Some((_, l)) => return Err(perr(1, format!("expected `{HEADER}`, got `{l}`"))),
        None => return Err(perr(1, "empty genotype")),
    }
    let (ln, l) = lines.next().ok_or_else(|| perr(2, "missing `stages` line"))?;
    let t: Vec<&str> = l.split_whitespace().collect();
    let ["stages", s, "n", n, "base", b, "latent", d] = t[..] else {
        return Err(perr(ln, "expected `stages S n N base B latent D`"));
    };
    let mut g = Genotype {
        stages: parse_usize(s, ln, "stages")?,
        n: parse_usize(n, ln, "n")?,
        base: parse_usize(b, ln, "base")?,
        latent_dim: parse_usize(d, ln, "latent")?,
        nodes: Vec::new(),
        provenance: None,
    };
    for (ln, l) in lines {
        let body = l.trim();
        if body.is_empty() {
            continue;
        }
        if g.provenance.is_some() {
            return Err(perr(ln, "content after the `# config` line"));
        }
        if let Some(c) = body.strip_prefix('#') {
            let t: Vec<&str> = c.split_whitespace().collect();
            let ["config", hash, "seed", seed] = t[..] else {
                return Err(perr(ln, "expected `# config <hash> seed <n>`"));
            };
            let seed = seed
                .parse()
                .map_err(|_| perr(ln, format!("bad seed `{seed}`")))?;
            g.provenance = Some(Provenance {
                config_hash: hash.to_string(),
                seed,
            });
            continue;
        }
        let node = parse_node(body, ln)?;
        if g.nodes.iter().any(|n| n.id == node.id) {
            return Err(perr(ln, format!("node `{}` listed twice", node.id)));
        }
        g.nodes.push(node);
    }
    if g.nodes.is_empty() {
        return Err(perr(text.lines().count().max(1), "no nodes"));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "degas-genotype v1\n\
stages 2 n 1 base 4 latent 8\n\
node u1 <- stem : up deconv4\n\
node n1 <- u1 : normal skip\n\
node u2 <- n1 : up deconv4 ; res u1 : nn_conv3\n\
node n2 <- u2 : normal sep_conv3x3\n\
# config 00ff00ff00ff00ff seed 3\n";

    #[test]
    fn residual_node_parses() {
        let g = parse_genotype(TEXT).unwrap();
        let u2 = g.node("u2").unwrap();
        assert_eq!(u2.class, OpClass::Upsample);
        assert_eq!(
            u2.residual,
            Some(ResidualChoice {
                source: "u1".into(),
                op: "nn_conv3".into()
            })
        );
        assert_eq!(g.provenance.as_ref().unwrap().seed, 3);
        assert_eq!(serialize_genotype(&g), TEXT);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            (TEXT.replace("deconv4 ; res", "deconv9 ; res"), 5),
            (TEXT.replace("normal skip", "normal warp"), 4),
            (TEXT.replace("v1", "v2"), 1),
            (TEXT.replace("latent 8", "latent x"), 2),
            (TEXT.replace(" <- stem", " stem"), 3),
            (TEXT.replace("res u1 : nn_conv3", "res u1 : zero"), 5),
        ];
        for (text, line) in cases {
            match parse_genotype(&text) {
                Err(Error::GenotypeParse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
