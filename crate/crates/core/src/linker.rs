//! Schema linking from candidate SQL: parse each candidate into the set of
//! base tables and columns it references, then union across candidates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    Expr, FunctionArg, FunctionArgExpr, FunctionArguments, GroupByExpr, Ident, JoinConstraint,
    JoinOperator, ObjectName, OrderBy, OrderByExpr, Query, Select, SelectItem, SetExpr, Statement,
    TableFactor, TableWithJoins, WindowType,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

use crate::schema::{DatabaseSchema, LinkedSchema};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("unparseable SQL: {0}")]
    UnparseableSql(String),
}

/// Tables and columns referenced by one SQL statement. Names use the
/// schema's original casing; aliases and CTE names never appear.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlReferenceSet {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<(String, String)>,
    /// Bare column names that could not be attributed to a single table.
    pub unresolved: BTreeSet<String>,
}

pub fn extract_references(
    sql: &str,
    schema: &DatabaseSchema,
) -> Result<SqlReferenceSet, LinkError> {
    if sql.trim().is_empty() {
        return Err(LinkError::UnparseableSql("empty statement".into()));
    }
    let stmts = Parser::parse_sql(&SQLiteDialect {}, sql)
        .map_err(|e| LinkError::UnparseableSql(e.to_string()))?;
    let query = match stmts.first() {
        Some(Statement::Query(q)) => q,
        Some(_) => return Err(LinkError::UnparseableSql("not a query".into())),
        None => return Err(LinkError::UnparseableSql("empty statement".into())),
    };
    let mut w = Walker {
        schema,
        scopes: Vec::new(),
        ctes: Vec::new(),
        out: SqlReferenceSet::default(),
    };
    w.query(query);
    Ok(w.out)
}

/// Union of reference sets. Unresolved bare names get one last chance: a
/// name owned by exactly one table in the schema is attributed to it,
/// otherwise it is dropped.
pub fn union_links(refsets: &[SqlReferenceSet], schema: &DatabaseSchema) -> LinkedSchema {
    let mut linked = LinkedSchema::default();
    for r in refsets {
        linked.tables.extend(r.tables.iter().cloned());
        linked.columns.extend(r.columns.iter().cloned());
        for name in &r.unresolved {
            if let [owner] = schema.owners_of(name).as_slice() {
                let col = owner.column(name).expect("owner has column");
                linked.tables.insert(owner.name.clone());
                linked
                    .columns
                    .insert((owner.name.clone(), col.name.clone()));
            }
        }
    }
    linked
}

#[derive(Debug, Clone)]
enum RelKind {
    /// Canonical schema table name.
    Base(String),
    /// CTE or derived table with its (lowercased) output columns.
    Virtual(Vec<String>),
}

#[derive(Debug, Clone)]
struct Relation {
    key: String,
    kind: RelKind,
}

#[derive(Debug, Default)]
struct Scope {
    relations: Vec<Relation>,
    aliases: BTreeSet<String>,
}

struct Walker<'a> {
    schema: &'a DatabaseSchema,
    scopes: Vec<Scope>,
    ctes: Vec<Vec<(String, Vec<String>)>>,
    out: SqlReferenceSet,
}

fn lower(id: &Ident) -> String {
    id.value.to_lowercase()
}

fn last_ident(name: &ObjectName) -> Option<&Ident> {
    name.0.last()
}

impl<'a> Walker<'a> {
    fn query(&mut self, q: &Query) -> Vec<String> {
        self.ctes.push(Vec::new());
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                let name = lower(&cte.alias.name);
                let declared: Vec<String> = cte.alias.columns.iter().map(lower).collect();
                if with.recursive {
                    self.ctes
                        .last_mut()
                        .expect("frame")
                        .push((name.clone(), declared.clone()));
                }
                let produced = self.query(&cte.query);
                let cols = if declared.is_empty() {
                    produced
                } else {
                    declared
                };
                let frame = self.ctes.last_mut().expect("frame");
                frame.retain(|(n, _)| n != &name);
                frame.push((name, cols));
            }
        }
        let cols = self.set_expr(&q.body, q.order_by.as_ref());
        if let Some(limit) = &q.limit {
            self.expr(limit);
        }
        if let Some(offset) = &q.offset {
            self.expr(&offset.value);
        }
        self.ctes.pop();
        cols
    }

    fn set_expr(&mut self, body: &SetExpr, order_by: Option<&OrderBy>) -> Vec<String> {
        match body {
            SetExpr::Select(s) => self.select(s, order_by),
            SetExpr::Query(q) => {
                let cols = self.query(q);
                self.order_by_outside(order_by, &cols);
                cols
            }
            SetExpr::SetOperation { left, right, .. } => {
                let cols = self.set_expr(left, None);
                self.set_expr(right, None);
                self.order_by_outside(order_by, &cols);
                cols
            }
            SetExpr::Values(v) => {
                for row in &v.rows {
                    for e in row {
                        self.expr(e);
                    }
                }
                let width = v.rows.first().map(Vec::len).unwrap_or(0);
                (1..=width).map(|i| format!("column{i}")).collect()
            }
            SetExpr::Table(t) => {
                if let Some(name) = &t.table_name {
                    if let Some(def) = self.schema.table(name) {
                        let cols = def.columns.iter().map(|c| c.name.to_lowercase()).collect();
                        self.out.tables.insert(def.name.clone());
                        return cols;
                    }
                }
                Vec::new()
            }
            SetExpr::Insert(_) | SetExpr::Update(_) => Vec::new(),
        }
    }

    /// ORDER BY over a compound select refers to output columns only.
    fn order_by_outside(&mut self, order_by: Option<&OrderBy>, outputs: &[String]) {
        if let Some(ob) = order_by {
            self.scopes.push(Scope {
                relations: Vec::new(),
                aliases: outputs.iter().cloned().collect(),
            });
            for o in &ob.exprs {
                self.order_expr(o);
            }
            self.scopes.pop();
        }
    }

    fn order_expr(&mut self, o: &OrderByExpr) {
        self.expr(&o.expr);
    }

    fn select(&mut self, s: &Select, order_by: Option<&OrderBy>) -> Vec<String> {
        self.scopes.push(Scope::default());
        for twj in &s.from {
            self.table_with_joins(twj);
        }
        let aliases: Vec<String> = s
            .projection
            .iter()
            .filter_map(|item| match item {
                SelectItem::ExprWithAlias { alias, .. } => Some(lower(alias)),
                _ => None,
            })
            .collect();
        self.scopes
            .last_mut()
            .expect("scope")
            .aliases
            .extend(aliases);

        let mut outputs = Vec::new();
        for item in &s.projection {
            match item {
                SelectItem::UnnamedExpr(e) => {
                    self.expr(e);
                    outputs.push(match e {
                        Expr::Identifier(id) => lower(id),
                        Expr::CompoundIdentifier(ids) => ids.last().map(lower).unwrap_or_default(),
                        other => other.to_string().to_lowercase(),
                    });
                }
                SelectItem::ExprWithAlias { expr, alias } => {
                    self.expr(expr);
                    outputs.push(lower(alias));
                }
                SelectItem::Wildcard(_) => {
                    let rels = self.scopes.last().expect("scope").relations.clone();
                    for rel in &rels {
                        outputs.extend(self.expand_relation(rel));
                    }
                }
                SelectItem::QualifiedWildcard(name, _) => {
                    if let Some(id) = last_ident(name) {
                        let key = lower(id);
                        let rel = self
                            .scopes
                            .last()
                            .and_then(|sc| sc.relations.iter().find(|r| r.key == key))
                            .cloned();
                        if let Some(rel) = rel {
                            outputs.extend(self.expand_relation(&rel));
                        }
                    }
                }
            }
        }
        if let Some(e) = &s.selection {
            self.expr(e);
        }
        if let GroupByExpr::Expressions(exprs, _) = &s.group_by {
            for e in exprs {
                self.expr(e);
            }
        }
        if let Some(e) = &s.having {
            self.expr(e);
        }
        if let Some(e) = &s.qualify {
            self.expr(e);
        }
        for nw in &s.named_window {
            if let sqlparser::ast::NamedWindowExpr::WindowSpec(spec) = &nw.1 {
                for e in &spec.partition_by {
                    self.expr(e);
                }
                for o in &spec.order_by {
                    self.order_expr(o);
                }
            }
        }
        if let Some(ob) = order_by {
            for o in &ob.exprs {
                self.order_expr(o);
            }
        }
        self.scopes.pop();
        outputs
    }

    /// Record every column of a base relation; return its output names.
    fn expand_relation(&mut self, rel: &Relation) -> Vec<String> {
        match &rel.kind {
            RelKind::Base(table) => {
                let def = self.schema.table(table).expect("base relation exists");
                for c in &def.columns {
                    self.out.columns.insert((def.name.clone(), c.name.clone()));
                }
                def.columns.iter().map(|c| c.name.to_lowercase()).collect()
            }
            RelKind::Virtual(cols) => cols.clone(),
        }
    }

    fn table_with_joins(&mut self, twj: &TableWithJoins) {
        self.factor(&twj.relation);
        for join in &twj.joins {
            let before = self.scopes.last().map(|s| s.relations.len()).unwrap_or(0);
            self.factor(&join.relation);
            let constraint = match &join.join_operator {
                JoinOperator::Inner(c)
                | JoinOperator::LeftOuter(c)
                | JoinOperator::RightOuter(c)
                | JoinOperator::FullOuter(c)
                | JoinOperator::LeftSemi(c)
                | JoinOperator::RightSemi(c)
                | JoinOperator::LeftAnti(c)
                | JoinOperator::RightAnti(c) => Some(c),
                JoinOperator::AsOf {
                    match_condition,
                    constraint,
                } => {
                    self.expr(match_condition);
                    Some(constraint)
                }
                JoinOperator::CrossJoin | JoinOperator::CrossApply | JoinOperator::OuterApply => {
                    None
                }
            };
            match constraint {
                Some(JoinConstraint::On(e)) => self.expr(e),
                Some(JoinConstraint::Using(cols)) => {
                    for c in cols {
                        self.mark_everywhere(&lower(c));
                    }
                }
                Some(JoinConstraint::Natural) => {
                    let rels = self.scopes.last().expect("scope").relations.clone();
                    let (left, right) = rels.split_at(before.min(rels.len()));
                    let left_cols: BTreeSet<String> =
                        left.iter().flat_map(|r| self.columns_of(r)).collect();
                    let shared: Vec<String> = right
                        .iter()
                        .flat_map(|r| self.columns_of(r))
                        .filter(|c| left_cols.contains(c))
                        .collect();
                    for col in shared {
                        self.mark_everywhere(&col);
                    }
                }
                Some(JoinConstraint::None) | None => {}
            }
        }
    }

    fn columns_of(&self, rel: &Relation) -> Vec<String> {
        match &rel.kind {
            RelKind::Base(t) => self
                .schema
                .table(t)
                .map(|d| d.columns.iter().map(|c| c.name.to_lowercase()).collect())
                .unwrap_or_default(),
            RelKind::Virtual(cols) => cols.clone(),
        }
    }

    /// USING/NATURAL join columns belong to every joined base relation that has them.
    fn mark_everywhere(&mut self, col: &str) {
        let rels = self.scopes.last().expect("scope").relations.clone();
        for rel in rels {
            if let RelKind::Base(t) = &rel.kind {
                if let Some(c) = self.schema.table(t).and_then(|d| d.column(col)) {
                    self.out.columns.insert((t.clone(), c.name.clone()));
                }
            }
        }
    }

    fn lookup_cte(&self, name: &str) -> Option<Vec<String>> {
        self.ctes.iter().rev().find_map(|frame| {
            frame
                .iter()
                .rev()
                .find(|(n, _)| n == name)
                .map(|(_, c)| c.clone())
        })
    }

    fn push_relation(&mut self, rel: Relation) {
        self.scopes.last_mut().expect("scope").relations.push(rel);
    }

    fn factor(&mut self, f: &TableFactor) {
        match f {
            TableFactor::Table {
                name, alias, args, ..
            } => {
                if let Some(args) = args {
                    for a in &args.args {
                        self.function_arg(a);
                    }
                }
                let Some(id) = last_ident(name) else { return };
                let tname = lower(id);
                let key = alias
                    .as_ref()
                    .map(|a| lower(&a.name))
                    .unwrap_or_else(|| tname.clone());
                // A single-part name may refer to a CTE in scope.
                if name.0.len() == 1 {
                    if let Some(cols) = self.lookup_cte(&tname) {
                        let cols = match alias {
                            Some(a) if !a.columns.is_empty() => {
                                a.columns.iter().map(lower).collect()
                            }
                            _ => cols,
                        };
                        self.push_relation(Relation {
                            key,
                            kind: RelKind::Virtual(cols),
                        });
                        return;
                    }
                }
                match self.schema.table(&tname).map(|d| d.name.clone()) {
                    Some(canonical) => {
                        self.out.tables.insert(canonical.clone());
                        self.push_relation(Relation {
                            key,
                            kind: RelKind::Base(canonical),
                        });
                    }
                    None => self.push_relation(Relation {
                        key,
                        kind: RelKind::Virtual(Vec::new()),
                    }),
                }
            }
            TableFactor::Derived {
                subquery, alias, ..
            } => {
                let produced = self.query(subquery);
                let (key, cols) = match alias {
                    Some(a) => {
                        let cols = if a.columns.is_empty() {
                            produced
                        } else {
                            a.columns.iter().map(lower).collect()
                        };
                        (lower(&a.name), cols)
                    }
                    None => (String::new(), produced),
                };
                self.push_relation(Relation {
                    key,
                    kind: RelKind::Virtual(cols),
                });
            }
            TableFactor::NestedJoin {
                table_with_joins, ..
            } => self.table_with_joins(table_with_joins),
            TableFactor::TableFunction { expr, alias } => {
                self.expr(expr);
                let key = alias.as_ref().map(|a| lower(&a.name)).unwrap_or_default();
                self.push_relation(Relation {
                    key,
                    kind: RelKind::Virtual(Vec::new()),
                });
            }
            TableFactor::Function { args, alias, .. } => {
                for a in args {
                    self.function_arg(a);
                }
                let key = alias.as_ref().map(|a| lower(&a.name)).unwrap_or_default();
                self.push_relation(Relation {
                    key,
                    kind: RelKind::Virtual(Vec::new()),
                });
            }
            TableFactor::UNNEST {
                array_exprs, alias, ..
            } => {
                for e in array_exprs {
                    self.expr(e);
                }
                let key = alias.as_ref().map(|a| lower(&a.name)).unwrap_or_default();
                self.push_relation(Relation {
                    key,
                    kind: RelKind::Virtual(Vec::new()),
                });
            }
            TableFactor::Pivot { table, .. }
            | TableFactor::Unpivot { table, .. }
            | TableFactor::MatchRecognize { table, .. } => self.factor(table),
            TableFactor::JsonTable { json_expr, .. } => self.expr(json_expr),
        }
    }

    fn bare_column(&mut self, name: &str) {
        for depth in (0..self.scopes.len()).rev() {
            let scope = &self.scopes[depth];
            let mut base_owners: Vec<String> = Vec::new();
            let mut virtual_owner = false;
            for rel in &scope.relations {
                match &rel.kind {
                    RelKind::Base(t) => {
                        if self.schema.table(t).and_then(|d| d.column(name)).is_some()
                            && !base_owners.contains(t)
                        {
                            base_owners.push(t.clone());
                        }
                    }
                    RelKind::Virtual(cols) => {
                        if cols.iter().any(|c| c == name) {
                            virtual_owner = true;
                        }
                    }
                }
            }
            match (base_owners.len(), virtual_owner) {
                (1, false) => {
                    let t = base_owners.pop().expect("one owner");
                    let col = self
                        .schema
                        .table(&t)
                        .and_then(|d| d.column(name))
                        .expect("owner")
                        .name
                        .clone();
                    self.out.columns.insert((t, col));
                    return;
                }
                (0, true) => return,
                (0, false) => {
                    if scope.aliases.contains(name) {
                        return;
                    }
                }
                _ => {
                    self.out.unresolved.insert(name.to_string());
                    return;
                }
            }
        }
        self.out.unresolved.insert(name.to_string());
    }

    fn qualified_column(&mut self, qualifier: &str, name: &str) {
        for scope in self.scopes.iter().rev() {
            if let Some(rel) = scope.relations.iter().rev().find(|r| r.key == qualifier) {
                if let RelKind::Base(t) = &rel.kind {
                    if let Some(c) = self.schema.table(t).and_then(|d| d.column(name)) {
                        let entry = (t.clone(), c.name.clone());
                        self.out.columns.insert(entry);
                    }
                }
                return;
            }
        }
    }

    fn function_arg(&mut self, a: &FunctionArg) {
        let arg = match a {
            FunctionArg::Named { arg, .. } => arg,
            FunctionArg::Unnamed(arg) => arg,
        };
        if let FunctionArgExpr::Expr(e) = arg {
            self.expr(e);
        }
    }

    fn function_args(&mut self, args: &FunctionArguments) {
        match args {
            FunctionArguments::None => {}
            FunctionArguments::Subquery(q) => {
                self.query(q);
            }
            FunctionArguments::List(list) => {
                for a in &list.args {
                    self.function_arg(a);
                }
                for clause in &list.clauses {
                    if let sqlparser::ast::FunctionArgumentClause::OrderBy(obs) = clause {
                        for o in obs {
                            self.order_expr(o);
                        }
                    }
                }
            }
        }
    }

    fn exprs(&mut self, es: &[Expr]) {
        for e in es {
            self.expr(e);
        }
    }

    fn expr(&mut self, e: &Expr) {
        match e {
            Expr::Identifier(id) => self.bare_column(&lower(id)),
            Expr::CompoundIdentifier(ids) => {
                if ids.len() >= 2 {
                    let q = lower(&ids[ids.len() - 2]);
                    let c = lower(&ids[ids.len() - 1]);
                    self.qualified_column(&q, &c);
                }
            }
            Expr::Wildcard
            | Expr::QualifiedWildcard(_)
            | Expr::Value(_)
            | Expr::TypedString { .. } => {}
            Expr::IntroducedString { .. } | Expr::MatchAgainst { .. } => {}
            Expr::JsonAccess { value, .. } => self.expr(value),
            Expr::CompositeAccess { expr, .. } => self.expr(expr),
            Expr::IsFalse(x)
            | Expr::IsNotFalse(x)
            | Expr::IsTrue(x)
            | Expr::IsNotTrue(x)
            | Expr::IsNull(x)
            | Expr::IsNotNull(x)
            | Expr::IsUnknown(x)
            | Expr::IsNotUnknown(x)
            | Expr::Nested(x)
            | Expr::OuterJoin(x)
            | Expr::Prior(x) => self.expr(x),
            Expr::IsDistinctFrom(a, b) | Expr::IsNotDistinctFrom(a, b) => {
                self.expr(a);
                self.expr(b);
            }
            Expr::InList { expr, list, .. } => {
                self.expr(expr);
                self.exprs(list);
            }
            Expr::InSubquery { expr, subquery, .. } => {
                self.expr(expr);
                self.query(subquery);
            }
            Expr::InUnnest {
                expr, array_expr, ..
            } => {
                self.expr(expr);
                self.expr(array_expr);
            }
            Expr::Between {
                expr, low, high, ..
            } => {
                self.expr(expr);
                self.expr(low);
                self.expr(high);
            }
            Expr::BinaryOp { left, right, .. }
            | Expr::AnyOp { left, right, .. }
            | Expr::AllOp { left, right, .. } => {
                self.expr(left);
                self.expr(right);
            }
            Expr::Like { expr, pattern, .. }
            | Expr::ILike { expr, pattern, .. }
            | Expr::SimilarTo { expr, pattern, .. }
            | Expr::RLike { expr, pattern, .. } => {
                self.expr(expr);
                self.expr(pattern);
            }
            Expr::UnaryOp { expr, .. }
            | Expr::Cast { expr, .. }
            | Expr::Extract { expr, .. }
            | Expr::Ceil { expr, .. }
            | Expr::Floor { expr, .. }
            | Expr::Collate { expr, .. }
            | Expr::Named { expr, .. } => self.expr(expr),
            Expr::Convert { expr, styles, .. } => {
                self.expr(expr);
                self.exprs(styles);
            }
            Expr::AtTimeZone {
                timestamp,
                time_zone,
            } => {
                self.expr(timestamp);
                self.expr(time_zone);
            }
            Expr::Position { expr, r#in } => {
                self.expr(expr);
                self.expr(r#in);
            }
            Expr::Substring {
                expr,
                substring_from,
                substring_for,
                ..
            } => {
                self.expr(expr);
                if let Some(x) = substring_from {
                    self.expr(x);
                }
                if let Some(x) = substring_for {
                    self.expr(x);
                }
            }
            Expr::Trim {
                expr,
                trim_what,
                trim_characters,
                ..
            } => {
                self.expr(expr);
                if let Some(x) = trim_what {
                    self.expr(x);
                }
                if let Some(xs) = trim_characters {
                    self.exprs(xs);
                }
            }
            Expr::Overlay {
                expr,
                overlay_what,
                overlay_from,
                overlay_for,
            } => {
                self.expr(expr);
                self.expr(overlay_what);
                self.expr(overlay_from);
                if let Some(x) = overlay_for {
                    self.expr(x);
                }
            }
            Expr::MapAccess { column, .. } => self.expr(column),
            Expr::Function(f) => {
                self.function_args(&f.parameters);
                self.function_args(&f.args);
                if let Some(x) = &f.filter {
                    self.expr(x);
                }
                if let Some(WindowType::WindowSpec(spec)) = &f.over {
                    self.exprs(&spec.partition_by);
                    for o in &spec.order_by {
                        self.order_expr(o);
                    }
                }
                for o in &f.within_group {
                    self.order_expr(o);
                }
            }
            Expr::Case {
                operand,
                conditions,
                results,
                else_result,
            } => {
                if let Some(x) = operand {
                    self.expr(x);
                }
                self.exprs(conditions);
                self.exprs(results);
                if let Some(x) = else_result {
                    self.expr(x);
                }
            }
            Expr::Exists { subquery, .. } | Expr::Subquery(subquery) => {
                self.query(subquery);
            }
            Expr::GroupingSets(sets) | Expr::Cube(sets) | Expr::Rollup(sets) => {
                for s in sets {
                    self.exprs(s);
                }
            }
            Expr::Tuple(xs) => self.exprs(xs),
            Expr::Struct { values, .. } => self.exprs(values),
            Expr::Array(a) => self.exprs(&a.elem),
            Expr::Subscript { expr, .. } => self.expr(expr),
            Expr::Interval(i) => self.expr(&i.value),
            Expr::Dictionary(_) | Expr::Map(_) | Expr::Lambda(_) => {}
        }
    }
}
