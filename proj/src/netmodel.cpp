#include "dispatch/netmodel.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace dispatch {

// ---------------------------------------------------------------------------
// Case text format: hierarchical key-value with arrays.
//
//   meta { T = 2  base_mva = 100 }
//   buses [ { id = b1  kind = swing  v_set = 1.0 } ... ]
//   branches [ { id = l1  from = b1  to = b2  r = 0.01  x = 0.1 } ... ]
//   bids [ { id = g1  bus = b1  price = [10, 12]  lb = 0  ub = 150 } ... ]
//   energy_groups [ { id = h1  members = [g2]  e_min = 0  e_max = 120 } ... ]
//   flow_constraints [ { id = f1  terms = [+l1, -l2]  limit = 40 } ... ]
//   demand { b2 { p = [100, 110]  q = 20 } }
//
// '#' starts a comment. Commas are optional separators. Scalars broadcast
// to length-T arrays. Loads, bid bounds, ramps, limits and energy bounds are
// in MW/MVAr/MWh and converted to per-unit on base_mva at load time.
// ---------------------------------------------------------------------------

namespace {

struct Value;
using ValueMap = std::vector<std::pair<std::string, Value>>;  // keeps file order

struct Value {
  enum class Kind { Number, Ident, SignedIdent, Array, Object } kind;
  double num = 0.0;
  std::string str;   // Ident / SignedIdent payload
  double sign = 1.0; // SignedIdent
  std::vector<Value> items;
  ValueMap fields;
  int line = 0, col = 0;
};

struct Lexer {
  const std::string& text;
  size_t pos = 0;
  int line = 1, col = 1;

  explicit Lexer(const std::string& t) : text(t) {}

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(msg, line, col); }

  void advance() {
    if (text[pos] == '\n') { line++; col = 1; } else { col++; }
    pos++;
  }

  void skip_ws() {
    while (pos < text.size()) {
      char c = text[pos];
      if (c == '#') {
        while (pos < text.size() && text[pos] != '\n') advance();
      } else if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
        advance();
      } else {
        break;
      }
    }
  }

  bool eof() {
    skip_ws();
    return pos >= text.size();
  }

  char peek() {
    skip_ws();
    return pos < text.size() ? text[pos] : '\0';
  }

  bool is_ident_char(char c) const {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == ':';
  }

  std::string lex_ident() {
    skip_ws();
    std::string s;
    while (pos < text.size() && is_ident_char(text[pos])) {
      s += text[pos];
      advance();
    }
    if (s.empty()) fail("expected identifier");
    return s;
  }

  double lex_number() {
    skip_ws();
    size_t start = pos;
    int sline = line, scol = col;
    if (pos < text.size() && (text[pos] == '+' || text[pos] == '-')) advance();
    while (pos < text.size() &&
           (std::isdigit(static_cast<unsigned char>(text[pos])) || text[pos] == '.' ||
            text[pos] == 'e' || text[pos] == 'E' ||
            ((text[pos] == '+' || text[pos] == '-') &&
             (text[pos - 1] == 'e' || text[pos - 1] == 'E')))) {
      advance();
    }
    std::string tok = text.substr(start, pos - start);
    try {
      size_t used = 0;
      double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw ParseError("malformed number '" + tok + "'", sline, scol);
    }
  }

  void expect(char c) {
    skip_ws();
    if (pos >= text.size() || text[pos] != c)
      fail(std::string("expected '") + c + "'");
    advance();
  }
};

Value parse_value(Lexer& lx);

Value parse_object(Lexer& lx) {
  Value v;
  v.kind = Value::Kind::Object;
  v.line = lx.line; v.col = lx.col;
  lx.expect('{');
  while (lx.peek() != '}') {
    if (lx.eof()) lx.fail("unterminated '{'");
    std::string key = lx.lex_ident();
    Value val;
    char c = lx.peek();
    if (c == '=') {
      lx.expect('=');
      val = parse_value(lx);
    } else if (c == '{' || c == '[') {
      val = parse_value(lx);  // "key { ... }" shorthand
    } else {
      lx.fail("expected '=' after key '" + key + "'");
    }
    v.fields.emplace_back(std::move(key), std::move(val));
  }
  lx.expect('}');
  return v;
}

Value parse_value(Lexer& lx) {
  char c = lx.peek();
  Value v;
  v.line = lx.line; v.col = lx.col;
  if (c == '{') return parse_object(lx);
  if (c == '[') {
    v.kind = Value::Kind::Array;
    lx.expect('[');
    while (lx.peek() != ']') {
      if (lx.eof()) lx.fail("unterminated '['");
      v.items.push_back(parse_value(lx));
    }
    lx.expect(']');
    return v;
  }
  if (c == '+' || c == '-') {
    size_t next = lx.pos + 1;
    bool numeric = next < lx.text.size() &&
                   (std::isdigit(static_cast<unsigned char>(lx.text[next])) || lx.text[next] == '.');
    if (!numeric) {
      v.kind = Value::Kind::SignedIdent;
      v.sign = (c == '+') ? 1.0 : -1.0;
      lx.advance();
      v.str = lx.lex_ident();
      return v;
    }
    v.kind = Value::Kind::Number;
    v.num = lx.lex_number();
    return v;
  }
  if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
    v.kind = Value::Kind::Number;
    v.num = lx.lex_number();
    return v;
  }
  v.kind = Value::Kind::Ident;
  v.str = lx.lex_ident();
  return v;
}

Value parse_document(const std::string& text) {
  Lexer lx(text);
  Value root;
  root.kind = Value::Kind::Object;
  while (!lx.eof()) {
    std::string key = lx.lex_ident();
    char c = lx.peek();
    Value val;
    if (c == '=') {
      lx.expect('=');
      val = parse_value(lx);
    } else if (c == '{' || c == '[') {
      val = parse_value(lx);
    } else {
      lx.fail("expected '{', '[' or '=' after section '" + key + "'");
    }
    root.fields.emplace_back(std::move(key), std::move(val));
  }
  return root;
}

// --- mapping helpers -------------------------------------------------------

[[noreturn]] void fail_at(const Value& v, const std::string& msg) {
  throw ParseError(msg, v.line, v.col);
}

const Value* find(const Value& obj, const std::string& key) {
  for (const auto& [k, v] : obj.fields)
    if (k == key) return &v;
  return nullptr;
}

double get_num(const Value& obj, const std::string& key, double dflt) {
  const Value* v = find(obj, key);
  if (!v) return dflt;
  if (v->kind != Value::Kind::Number) fail_at(*v, "field '" + key + "' must be a number");
  return v->num;
}

double require_num(const Value& obj, const std::string& key) {
  const Value* v = find(obj, key);
  if (!v) fail_at(obj, "missing required field '" + key + "'");
  if (v->kind != Value::Kind::Number) fail_at(*v, "field '" + key + "' must be a number");
  return v->num;
}

std::string require_ident(const Value& obj, const std::string& key) {
  const Value* v = find(obj, key);
  if (!v) fail_at(obj, "missing required field '" + key + "'");
  if (v->kind != Value::Kind::Ident) fail_at(*v, "field '" + key + "' must be an identifier");
  return v->str;
}

// Scalar broadcasts to length T.
std::vector<double> get_series(const Value& obj, const std::string& key, int T,
                               double dflt, bool required = false) {
  const Value* v = find(obj, key);
  if (!v) {
    if (required) fail_at(obj, "missing required field '" + key + "'");
    return std::vector<double>(static_cast<size_t>(T), dflt);
  }
  if (v->kind == Value::Kind::Number)
    return std::vector<double>(static_cast<size_t>(T), v->num);
  if (v->kind != Value::Kind::Array) fail_at(*v, "field '" + key + "' must be a number or array");
  std::vector<double> out;
  for (const auto& it : v->items) {
    if (it.kind != Value::Kind::Number) fail_at(it, "array element must be a number");
    out.push_back(it.num);
  }
  if (static_cast<int>(out.size()) != T)
    fail_at(*v, "field '" + key + "' has " + std::to_string(out.size()) +
                " entries, expected T=" + std::to_string(T));
  return out;
}

CaseModel map_case(const Value& root) {
  CaseModel cs;
  const Value* meta = find(root, "meta");
  if (!meta) throw ParseError("missing 'meta' section", 1, 1);
  cs.T = static_cast<int>(require_num(*meta, "T"));
  cs.base_mva = get_num(*meta, "base_mva", 100.0);
  if (const Value* n = find(*meta, "name"); n && n->kind == Value::Kind::Ident) cs.name = n->str;
  if (cs.T < 1) fail_at(*meta, "T must be >= 1");
  if (!(cs.base_mva > 0)) fail_at(*meta, "base_mva must be > 0");
  const double b = cs.base_mva;

  if (const Value* sec = find(root, "buses")) {
    if (sec->kind != Value::Kind::Array) fail_at(*sec, "'buses' must be an array");
    for (const auto& e : sec->items) {
      if (e.kind != Value::Kind::Object) fail_at(e, "bus entry must be an object");
      Bus bus;
      bus.id = require_ident(e, "id");
      bus.island = static_cast<int>(get_num(e, "island", 0));
      std::string kind = "PQ";
      if (const Value* k = find(e, "kind")) {
        if (k->kind != Value::Kind::Ident) fail_at(*k, "bus kind must be PQ, PV or swing");
        kind = k->str;
      }
      if (kind == "PQ") bus.kind = BusKind::PQ;
      else if (kind == "PV") bus.kind = BusKind::PV;
      else if (kind == "swing") bus.kind = BusKind::Swing;
      else fail_at(e, "bus '" + bus.id + "': unknown kind '" + kind + "'");
      bus.g_sh = get_num(e, "g_sh", 0.0);
      bus.b_sh = get_num(e, "b_sh", 0.0);
      bus.v_set = get_num(e, "v_set", 1.0);
      bus.q_min = find(e, "q_min") ? get_num(e, "q_min", 0.0) / b : -kInf;
      bus.q_max = find(e, "q_max") ? get_num(e, "q_max", 0.0) / b : kInf;
      bus.p_load.assign(static_cast<size_t>(cs.T), 0.0);
      bus.q_load.assign(static_cast<size_t>(cs.T), 0.0);
      cs.buses.push_back(std::move(bus));
    }
  }

  if (const Value* sec = find(root, "branches")) {
    if (sec->kind != Value::Kind::Array) fail_at(*sec, "'branches' must be an array");
    int n = 0;
    for (const auto& e : sec->items) {
      if (e.kind != Value::Kind::Object) fail_at(e, "branch entry must be an object");
      Branch br;
      br.id = find(e, "id") ? require_ident(e, "id") : ("br" + std::to_string(n));
      br.from_id = require_ident(e, "from");
      br.to_id = require_ident(e, "to");
      br.r = get_num(e, "r", 0.0);
      br.x = require_num(e, "x");
      br.b_ch = get_num(e, "b_ch", 0.0);
      br.tap = get_num(e, "tap", 1.0);
      br.shift = get_num(e, "shift", 0.0);
      auto st = get_series(e, "status", cs.T, 1.0);
      for (double s : st) br.status.push_back(s != 0.0 ? 1 : 0);
      cs.branches.push_back(std::move(br));
      n++;
    }
  }

  if (const Value* sec = find(root, "bids")) {
    if (sec->kind != Value::Kind::Array) fail_at(*sec, "'bids' must be an array");
    for (const auto& e : sec->items) {
      if (e.kind != Value::Kind::Object) fail_at(e, "bid entry must be an object");
      Bid bid;
      bid.id = require_ident(e, "id");
      bid.bus_id = require_ident(e, "bus");
      bid.price = get_series(e, "price", cs.T, 0.0, true);
      bid.lb = get_series(e, "lb", cs.T, 0.0);
      bid.ub = get_series(e, "ub", cs.T, 0.0, true);
      for (auto& v : bid.lb) v /= b;
      for (auto& v : bid.ub) v /= b;
      bid.ramp_up = find(e, "ramp_up") ? get_num(e, "ramp_up", 0.0) / b : kInf;
      bid.ramp_down = find(e, "ramp_down") ? get_num(e, "ramp_down", 0.0) / b : kInf;
      bid.p_initial = get_num(e, "p_initial", 0.0) / b;
      cs.bids.push_back(std::move(bid));
    }
  }

  if (const Value* sec = find(root, "energy_groups")) {
    if (sec->kind != Value::Kind::Array) fail_at(*sec, "'energy_groups' must be an array");
    for (const auto& e : sec->items) {
      EnergyGroup g;
      g.id = require_ident(e, "id");
      const Value* mem = find(e, "members");
      if (!mem || mem->kind != Value::Kind::Array) fail_at(e, "group '" + g.id + "': missing members array");
      for (const auto& m : mem->items) {
        if (m.kind != Value::Kind::Ident) fail_at(m, "group member must be a bid id");
        g.member_ids.push_back(m.str);
      }
      g.e_min = get_num(e, "e_min", 0.0) / b;
      g.e_max = find(e, "e_max") ? get_num(e, "e_max", 0.0) / b : kInf;
      cs.energy_groups.push_back(std::move(g));
    }
  }

  if (const Value* sec = find(root, "flow_constraints")) {
    if (sec->kind != Value::Kind::Array) fail_at(*sec, "'flow_constraints' must be an array");
    for (const auto& e : sec->items) {
      FlowConstraint fc;
      fc.id = require_ident(e, "id");
      const Value* terms = find(e, "terms");
      if (!terms || terms->kind != Value::Kind::Array)
        fail_at(e, "flow constraint '" + fc.id + "': missing terms array");
      for (const auto& t : terms->items) {
        FlowTerm term;
        if (t.kind == Value::Kind::SignedIdent) {
          term.branch_id = t.str;
          term.sign = t.sign;
        } else if (t.kind == Value::Kind::Ident) {
          term.branch_id = t.str;
          term.sign = 1.0;
        } else {
          fail_at(t, "flow term must be a (signed) branch id");
        }
        fc.terms.push_back(std::move(term));
      }
      fc.limit = get_series(e, "limit", cs.T, 0.0, true);
      for (auto& v : fc.limit) v /= b;
      cs.flow_constraints.push_back(std::move(fc));
    }
  }

  if (const Value* sec = find(root, "demand")) {
    if (sec->kind != Value::Kind::Object) fail_at(*sec, "'demand' must be an object");
    for (const auto& [bus_id, entry] : sec->fields) {
      int bi = -1;
      for (int i = 0; i < cs.n_buses(); i++)
        if (cs.buses[static_cast<size_t>(i)].id == bus_id) { bi = i; break; }
      if (bi < 0) fail_at(entry, "demand references unknown bus '" + bus_id + "'");
      Bus& bus = cs.buses[static_cast<size_t>(bi)];
      std::vector<double> p, q(static_cast<size_t>(cs.T), 0.0);
      if (entry.kind == Value::Kind::Object) {
        p = get_series(entry, "p", cs.T, 0.0, true);
        q = get_series(entry, "q", cs.T, 0.0);
      } else {
        Value wrap;
        wrap.kind = Value::Kind::Object;
        wrap.line = entry.line; wrap.col = entry.col;
        wrap.fields.emplace_back("p", entry);
        p = get_series(wrap, "p", cs.T, 0.0, true);
      }
      for (int t = 0; t < cs.T; t++) {
        bus.p_load[static_cast<size_t>(t)] = p[static_cast<size_t>(t)] / b;
        bus.q_load[static_cast<size_t>(t)] = q[static_cast<size_t>(t)] / b;
      }
    }
  }

  return cs;
}

}  // namespace

// ---------------------------------------------------------------------------

int CaseModel::bus_index(const std::string& id) const {
  for (int i = 0; i < n_buses(); i++)
    if (buses[static_cast<size_t>(i)].id == id) return i;
  return -1;
}

int CaseModel::island_index(int island_id) const {
  auto it = std::find(island_ids.begin(), island_ids.end(), island_id);
  return it == island_ids.end() ? -1 : static_cast<int>(it - island_ids.begin());
}

void CaseModel::relink() {
  for (auto& br : branches) {
    br.from = bus_index(br.from_id);
    br.to = bus_index(br.to_id);
    if (br.from < 0) throw ValidationError("branch " + br.id + ": unknown bus '" + br.from_id + "'");
    if (br.to < 0) throw ValidationError("branch " + br.id + ": unknown bus '" + br.to_id + "'");
  }
  for (auto& bid : bids) {
    bid.bus = bus_index(bid.bus_id);
    if (bid.bus < 0) throw ValidationError("bid " + bid.id + ": unknown bus '" + bid.bus_id + "'");
  }
  for (auto& g : energy_groups) {
    g.members.clear();
    for (const auto& mid : g.member_ids) {
      int idx = -1;
      for (int i = 0; i < n_bids(); i++)
        if (bids[static_cast<size_t>(i)].id == mid) { idx = i; break; }
      if (idx < 0) throw ValidationError("energy group " + g.id + ": unknown bid '" + mid + "'");
      g.members.push_back(idx);
    }
  }
  for (auto& fc : flow_constraints) {
    for (auto& t : fc.terms) {
      t.branch = -1;
      for (int i = 0; i < static_cast<int>(branches.size()); i++)
        if (branches[static_cast<size_t>(i)].id == t.branch_id) { t.branch = i; break; }
      if (t.branch < 0)
        throw ValidationError("flow constraint " + fc.id + ": unknown branch '" + t.branch_id + "'");
    }
  }
  island_ids.clear();
  for (const auto& bus : buses)
    if (std::find(island_ids.begin(), island_ids.end(), bus.island) == island_ids.end())
      island_ids.push_back(bus.island);
  std::sort(island_ids.begin(), island_ids.end());
  swing_bus.assign(island_ids.size(), -1);
  for (int i = 0; i < n_buses(); i++) {
    const Bus& bus = buses[static_cast<size_t>(i)];
    if (bus.kind == BusKind::Swing) {
      int isl = island_index(bus.island);
      if (swing_bus[static_cast<size_t>(isl)] < 0) swing_bus[static_cast<size_t>(isl)] = i;
    }
  }
}

// --- validation ------------------------------------------------------------

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<size_t>(n)) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int a) {
    while (parent[static_cast<size_t>(a)] != a) {
      parent[static_cast<size_t>(a)] = parent[static_cast<size_t>(parent[static_cast<size_t>(a)])];
      a = parent[static_cast<size_t>(a)];
    }
    return a;
  }
  void unite(int a, int b) { parent[static_cast<size_t>(find(a))] = find(b); }
};

}  // namespace

ValidationReport validate_case(const CaseModel& cs) {
  ValidationReport rep;
  auto add = [&](const std::string& ent, int hour, const std::string& msg) {
    rep.violations.push_back({ent, hour, msg});
  };
  const size_t T = static_cast<size_t>(cs.T);

  if (cs.T < 1) add("meta", -1, "T must be >= 1");
  if (!(cs.base_mva > 0)) add("meta", -1, "base_mva must be > 0");

  for (int i = 0; i < cs.n_buses(); i++) {
    const Bus& bus = cs.buses[static_cast<size_t>(i)];
    for (int j = 0; j < i; j++)
      if (cs.buses[static_cast<size_t>(j)].id == bus.id)
        add("bus " + bus.id, -1, "duplicate bus id");
    if (bus.p_load.size() != T || bus.q_load.size() != T)
      add("bus " + bus.id, -1, "load series length != T");
    if (bus.kind != BusKind::PQ && !(bus.v_set > 0))
      add("bus " + bus.id, -1, "v_set must be > 0");
    if (bus.q_min > bus.q_max)
      add("bus " + bus.id, -1, "q_min > q_max");
  }

  // exactly one swing per island
  for (size_t k = 0; k < cs.island_ids.size(); k++) {
    int count = 0;
    for (const auto& bus : cs.buses)
      if (bus.island == cs.island_ids[k] && bus.kind == BusKind::Swing) count++;
    if (count != 1)
      add("island " + std::to_string(cs.island_ids[k]), -1,
          count == 0 ? "no swing bus" : "multiple swing buses (" + std::to_string(count) + ")");
  }

  for (const auto& br : cs.branches) {
    if (br.from == br.to) add("branch " + br.id, -1, "from == to");
    if (br.x == 0.0) add("branch " + br.id, -1, "x must be nonzero");
    if (!(br.tap > 0)) add("branch " + br.id, -1, "tap must be > 0");
    if (br.status.size() != T) add("branch " + br.id, -1, "status series length != T");
  }

  for (const auto& bid : cs.bids) {
    if (bid.price.size() != T || bid.lb.size() != T || bid.ub.size() != T) {
      add("bid " + bid.id, -1, "series length != T");
      continue;
    }
    for (int t = 0; t < cs.T; t++)
      if (bid.lb[static_cast<size_t>(t)] > bid.ub[static_cast<size_t>(t)])
        add("bid " + bid.id, t, "lb > ub");
    if (bid.ramp_up < 0) add("bid " + bid.id, -1, "ramp_up < 0");
    if (bid.ramp_down < 0) add("bid " + bid.id, -1, "ramp_down < 0");
  }

  for (const auto& g : cs.energy_groups) {
    if (g.members.empty()) add("energy group " + g.id, -1, "no members");
    if (g.e_min > g.e_max) add("energy group " + g.id, -1, "e_min > e_max");
  }

  for (const auto& fc : cs.flow_constraints) {
    if (fc.terms.empty()) add("flow constraint " + fc.id, -1, "no terms");
    if (fc.limit.size() != T) add("flow constraint " + fc.id, -1, "limit series length != T");
  }

  // per-hour island connectivity on in-service branches
  for (int t = 0; t < cs.T; t++) {
    UnionFind uf(cs.n_buses());
    for (const auto& br : cs.branches) {
      if (!br.in_service(t)) continue;
      if (cs.buses[static_cast<size_t>(br.from)].island != cs.buses[static_cast<size_t>(br.to)].island) {
        add("branch " + br.id, t, "in-service branch crosses islands");
        continue;
      }
      uf.unite(br.from, br.to);
    }
    for (size_t k = 0; k < cs.island_ids.size(); k++) {
      int rep_bus = -1;
      bool connected = true;
      for (int i = 0; i < cs.n_buses(); i++) {
        if (cs.buses[static_cast<size_t>(i)].island != cs.island_ids[k]) continue;
        if (rep_bus < 0) rep_bus = i;
        else if (uf.find(i) != uf.find(rep_bus)) connected = false;
      }
      if (!connected)
        add("island " + std::to_string(cs.island_ids[k]), t, "not connected via in-service branches");
    }
  }

  return rep;
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (const auto& v : violations) {
    os << v.entity;
    if (v.hour >= 0) os << " (hour " << v.hour << ")";
    os << ": " << v.message << "\n";
  }
  return os.str();
}

// --- load / serialize ------------------------------------------------------

CaseModel parse_case(std::istream& in) {
  std::ostringstream buf;
  buf << in.rdbuf();
  CaseModel cs = map_case(parse_document(buf.str()));
  cs.relink();
  return cs;
}

CaseModel load_case(std::istream& in) {
  CaseModel cs = parse_case(in);
  ValidationReport rep = validate_case(cs);
  if (!rep.ok()) {
    const Violation& v = rep.violations.front();
    throw ValidationError(v.entity + (v.hour >= 0 ? " (hour " + std::to_string(v.hour) + ")" : "") +
                          ": " + v.message);
  }
  return cs;
}

CaseModel load_case_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open case file '" + path + "'");
  return load_case(in);
}

namespace {

std::string fmt(double v) {
  if (v == kInf) return "inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_series(const std::vector<double>& v, double scale) {
  std::string s = "[";
  for (size_t i = 0; i < v.size(); i++) {
    if (i) s += ", ";
    s += fmt(v[i] * scale);
  }
  return s + "]";
}

}  // namespace

std::string serialize_case(const CaseModel& cs) {
  std::ostringstream os;
  const double b = cs.base_mva;
  os << "meta { T = " << cs.T << "  base_mva = " << fmt(b);
  if (!cs.name.empty()) os << "  name = " << cs.name;
  os << " }\n\n";

  os << "buses [\n";
  for (const auto& bus : cs.buses) {
    os << "  { id = " << bus.id << "  island = " << bus.island << "  kind = "
       << (bus.kind == BusKind::PQ ? "PQ" : bus.kind == BusKind::PV ? "PV" : "swing");
    if (bus.g_sh != 0) os << "  g_sh = " << fmt(bus.g_sh);
    if (bus.b_sh != 0) os << "  b_sh = " << fmt(bus.b_sh);
    if (bus.kind != BusKind::PQ) os << "  v_set = " << fmt(bus.v_set);
    if (bus.q_min != -kInf) os << "  q_min = " << fmt(bus.q_min * b);
    if (bus.q_max != kInf) os << "  q_max = " << fmt(bus.q_max * b);
    os << " }\n";
  }
  os << "]\n\nbranches [\n";
  for (const auto& br : cs.branches) {
    os << "  { id = " << br.id << "  from = " << br.from_id << "  to = " << br.to_id
       << "  r = " << fmt(br.r) << "  x = " << fmt(br.x);
    if (br.b_ch != 0) os << "  b_ch = " << fmt(br.b_ch);
    if (br.tap != 1.0) os << "  tap = " << fmt(br.tap);
    if (br.shift != 0) os << "  shift = " << fmt(br.shift);
    bool all_on = std::all_of(br.status.begin(), br.status.end(), [](uint8_t s) { return s != 0; });
    if (!all_on) {
      os << "  status = [";
      for (size_t t = 0; t < br.status.size(); t++) os << (t ? ", " : "") << int(br.status[t]);
      os << "]";
    }
    os << " }\n";
  }
  os << "]\n\nbids [\n";
  for (const auto& bid : cs.bids) {
    os << "  { id = " << bid.id << "  bus = " << bid.bus_id
       << "  price = " << fmt_series(bid.price, 1.0)
       << "  lb = " << fmt_series(bid.lb, b) << "  ub = " << fmt_series(bid.ub, b);
    if (bid.ramp_up != kInf) os << "  ramp_up = " << fmt(bid.ramp_up * b);
    if (bid.ramp_down != kInf) os << "  ramp_down = " << fmt(bid.ramp_down * b);
    if (bid.p_initial != 0) os << "  p_initial = " << fmt(bid.p_initial * b);
    os << " }\n";
  }
  os << "]\n";
  if (!cs.energy_groups.empty()) {
    os << "\nenergy_groups [\n";
    for (const auto& g : cs.energy_groups) {
      os << "  { id = " << g.id << "  members = [";
      for (size_t i = 0; i < g.member_ids.size(); i++) os << (i ? ", " : "") << g.member_ids[i];
      os << "]  e_min = " << fmt(g.e_min * b);
      if (g.e_max != kInf) os << "  e_max = " << fmt(g.e_max * b);
      os << " }\n";
    }
    os << "]\n";
  }
  if (!cs.flow_constraints.empty()) {
    os << "\nflow_constraints [\n";
    for (const auto& fc : cs.flow_constraints) {
      os << "  { id = " << fc.id << "  terms = [";
      for (size_t i = 0; i < fc.terms.size(); i++)
        os << (i ? ", " : "") << (fc.terms[i].sign >= 0 ? "+" : "-") << fc.terms[i].branch_id;
      os << "]  limit = " << fmt_series(fc.limit, b) << " }\n";
    }
    os << "]\n";
  }
  os << "\ndemand {\n";
  for (const auto& bus : cs.buses) {
    bool has_p = std::any_of(bus.p_load.begin(), bus.p_load.end(), [](double v) { return v != 0; });
    bool has_q = std::any_of(bus.q_load.begin(), bus.q_load.end(), [](double v) { return v != 0; });
    if (!has_p && !has_q) continue;
    os << "  " << bus.id << " { p = " << fmt_series(bus.p_load, b);
    if (has_q) os << "  q = " << fmt_series(bus.q_load, b);
    os << " }\n";
  }
  os << "}\n";
  return os.str();
}

// --- admittance & incidence ------------------------------------------------

AdmittanceStructure build_admittance(const CaseModel& cs, int hour) {
  if (hour < 0 || hour >= cs.T) throw DimensionMismatch("hour out of range");
  const int n = cs.n_buses();
  AdmittanceStructure adm;
  adm.hour = hour;
  adm.ports.resize(cs.branches.size());

  using C = std::complex<double>;
  std::vector<Eigen::Triplet<C>> trips;
  for (size_t bi = 0; bi < cs.branches.size(); bi++) {
    const Branch& br = cs.branches[bi];
    auto& port = adm.ports[bi];
    port.in_service = br.in_service(hour);
    if (!port.in_service) continue;
    C ys = 1.0 / C(br.r, br.x);
    C ych(0.0, br.b_ch / 2.0);
    C ratio = std::polar(br.tap, br.shift);
    port.yff = (ys + ych) / (br.tap * br.tap);
    port.yft = -ys / std::conj(ratio);
    port.ytf = -ys / ratio;
    port.ytt = ys + ych;
    trips.emplace_back(br.from, br.from, port.yff);
    trips.emplace_back(br.from, br.to, port.yft);
    trips.emplace_back(br.to, br.from, port.ytf);
    trips.emplace_back(br.to, br.to, port.ytt);
  }
  for (int i = 0; i < n; i++) {
    const Bus& bus = cs.buses[static_cast<size_t>(i)];
    if (bus.g_sh != 0 || bus.b_sh != 0)
      trips.emplace_back(i, i, C(bus.g_sh, bus.b_sh));
  }
  adm.ybus.resize(n, n);
  adm.ybus.setFromTriplets(trips.begin(), trips.end());

  // every island must keep its swing reachable at this hour
  UnionFind uf(n);
  for (const auto& br : cs.branches)
    if (br.in_service(hour)) uf.unite(br.from, br.to);
  for (size_t k = 0; k < cs.island_ids.size(); k++) {
    int sw = cs.swing_bus[k];
    if (sw < 0) throw IslandingError("island " + std::to_string(cs.island_ids[k]) + " has no swing bus");
    for (int i = 0; i < n; i++) {
      if (cs.buses[static_cast<size_t>(i)].island != cs.island_ids[k]) continue;
      if (uf.find(i) != uf.find(sw))
        throw IslandingError("island " + std::to_string(cs.island_ids[k]) + " loses bus " +
                             cs.buses[static_cast<size_t>(i)].id + " from its swing at hour " +
                             std::to_string(hour));
    }
  }
  return adm;
}

IncidenceMap bid_incidence(const CaseModel& cs) {
  IncidenceMap map;
  map.bid_bus.resize(static_cast<size_t>(cs.n_bids()));
  map.group_of_bid.assign(static_cast<size_t>(cs.n_bids()), -1);
  for (int i = 0; i < cs.n_bids(); i++) {
    int bus = cs.bids[static_cast<size_t>(i)].bus;
    map.bid_bus[static_cast<size_t>(i)] = bus;
    int g = -1;
    for (size_t k = 0; k < map.group_bus.size(); k++)
      if (map.group_bus[k] == bus) { g = static_cast<int>(k); break; }
    if (g < 0) {
      g = map.n_groups();
      map.group_bus.push_back(bus);
      map.groups.emplace_back();
    }
    map.groups[static_cast<size_t>(g)].push_back(i);
    map.group_of_bid[static_cast<size_t>(i)] = g;
  }
  return map;
}

// --- structural equality ---------------------------------------------------

namespace {
bool eq(double a, double b) { return a == b || (std::isinf(a) && std::isinf(b) && a * b > 0); }
bool eq(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); i++)
    if (!eq(a[i], b[i])) return false;
  return true;
}
}  // namespace

bool structurally_equal(const CaseModel& a, const CaseModel& b) {
  if (a.T != b.T || !eq(a.base_mva, b.base_mva)) return false;
  if (a.buses.size() != b.buses.size() || a.branches.size() != b.branches.size() ||
      a.bids.size() != b.bids.size() || a.energy_groups.size() != b.energy_groups.size() ||
      a.flow_constraints.size() != b.flow_constraints.size())
    return false;
  for (size_t i = 0; i < a.buses.size(); i++) {
    const Bus &x = a.buses[i], &y = b.buses[i];
    if (x.id != y.id || x.island != y.island || x.kind != y.kind) return false;
    if (!eq(x.p_load, y.p_load) || !eq(x.q_load, y.q_load)) return false;
    if (!eq(x.g_sh, y.g_sh) || !eq(x.b_sh, y.b_sh) || !eq(x.v_set, y.v_set)) return false;
    if (!eq(x.q_min, y.q_min) || !eq(x.q_max, y.q_max)) return false;
  }
  for (size_t i = 0; i < a.branches.size(); i++) {
    const Branch &x = a.branches[i], &y = b.branches[i];
    if (x.id != y.id || x.from != y.from || x.to != y.to || x.status != y.status) return false;
    if (!eq(x.r, y.r) || !eq(x.x, y.x) || !eq(x.b_ch, y.b_ch) || !eq(x.tap, y.tap) ||
        !eq(x.shift, y.shift))
      return false;
  }
  for (size_t i = 0; i < a.bids.size(); i++) {
    const Bid &x = a.bids[i], &y = b.bids[i];
    if (x.id != y.id || x.bus != y.bus) return false;
    if (!eq(x.price, y.price) || !eq(x.lb, y.lb) || !eq(x.ub, y.ub)) return false;
    if (!eq(x.ramp_up, y.ramp_up) || !eq(x.ramp_down, y.ramp_down) || !eq(x.p_initial, y.p_initial))
      return false;
  }
  for (size_t i = 0; i < a.energy_groups.size(); i++) {
    const EnergyGroup &x = a.energy_groups[i], &y = b.energy_groups[i];
    if (x.id != y.id || x.members != y.members || !eq(x.e_min, y.e_min) || !eq(x.e_max, y.e_max))
      return false;
  }
  for (size_t i = 0; i < a.flow_constraints.size(); i++) {
    const FlowConstraint &x = a.flow_constraints[i], &y = b.flow_constraints[i];
    if (x.id != y.id || x.terms.size() != y.terms.size() || !eq(x.limit, y.limit)) return false;
    for (size_t j = 0; j < x.terms.size(); j++)
      if (x.terms[j].branch != y.terms[j].branch || x.terms[j].sign != y.terms[j].sign) return false;
  }
  return true;
}

}  // namespace dispatch
