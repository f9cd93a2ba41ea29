#include <cstdio>
#include <sstream>

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/labctl.hpp"

namespace fingerlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json features_to_json(const std::map<std::string, std::vector<RankedFeature>>& features) {
  json j = json::object();
  for (const auto& [cls, list] : features) {
    j[cls] = json::array();
    for (const auto& f : list) j[cls].push_back({{"token", f.token}, {"text", f.text}, {"weight", f.weight}});
  }
  return j;
}

std::map<std::string, std::vector<RankedFeature>> features_from_json(const json& j) {
  std::map<std::string, std::vector<RankedFeature>> out;
  for (const auto& [cls, list] : j.items()) {
    for (const auto& f : list) {
      out[cls].push_back({f.at("token").get<TokenId>(), f.at("text").get<std::string>(), f.at("weight").get<double>()});
    }
  }
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string pct(double v) { return fmt("%.1f%%", v * 100.0); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void to_json(json& j, const SeedResult& r) {
  j = {{"split_seed", r.split_seed}, {"accuracy", r.accuracy},   {"n_test", r.n_test},
       {"n_train", r.n_train},       {"confusion", r.confusion}, {"top_features", features_to_json(r.top_features)}};
}

void from_json(const json& j, SeedResult& r) {
  r.split_seed = j.at("split_seed").get<std::uint64_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.n_test = j.at("n_test").get<std::int64_t>();
  r.n_train = j.at("n_train").get<std::int64_t>();
  r.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
  r.top_features = features_from_json(j.at("top_features"));
}

void to_json(json& j, const AttributionReport& r) {
  j = {{"setting", r.setting},
       {"classifier", r.classifier},
       {"class_names", r.class_names},
       {"split_seeds", r.split_seeds},
       {"accuracies", r.accuracies},
       {"mean", r.mean},
       {"std", r.std},
       {"mean_std", format_mean_std({r.mean, r.std})},
       {"chance_rate", r.chance_rate},
       {"p_value", r.p_value},
       {"n_test", r.n_test},
       {"n_train", r.n_train},
       {"confusion", r.confusion},
       {"top_features", features_to_json(r.top_features)}};
}

void from_json(const json& j, AttributionReport& r) {
  r.setting = j.at("setting").get<std::string>();
  r.classifier = j.at("classifier").get<std::string>();
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  r.split_seeds = j.at("split_seeds").get<std::vector<std::uint64_t>>();
  r.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.mean = j.at("mean").get<double>();
  r.std = j.at("std").get<double>();
  r.chance_rate = j.at("chance_rate").get<double>();
  r.p_value = j.at("p_value").get<double>();
  r.n_test = j.at("n_test").get<std::int64_t>();
  r.n_train = j.at("n_train").get<std::int64_t>();
  r.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
  r.top_features = features_from_json(j.at("top_features"));
}

json bundle_to_json(const ReportBundle& b) {
  json j;
  j["format"] = "fingerlab.report/1";
  j["name"] = b.name;
  j["setting"] = b.setting;
  j["n_classes"] = b.n_classes;
  j["chance_rate"] = b.chance_rate();
  j["class_names"] = b.class_names;
  j["partial"] = b.partial();
  j["reports"] = b.reports;
  j["series"] = json::array();
  for (const auto& s : b.series) {
    json pts = json::array();
    for (const auto& p : s.points) {
      pts.push_back({{"x", p.x}, {"tokens", p.tokens}, {"mean", p.mean}, {"std", p.std},
                     {"p_value", p.p_value}, {"n_test", p.n_test}});
    }
    j["series"].push_back({{"kind", s.kind}, {"classifier", s.classifier}, {"points", pts}});
  }
  j["parity"] = {{"perplexity", b.parity.perplexity}, {"band", b.parity.band},
                 {"spread", b.parity.spread}, {"ok", b.parity.ok}};
  j["provenance"] = b.provenance;
  j["dataset"] = b.dataset;
  j["failures"] = json::array();
  for (const auto& f : b.failures) j["failures"].push_back({{"stage", f.stage}, {"message", f.message}});
  j["cache"] = {{"hits", b.cache_hits}, {"misses", b.cache_misses}};
  j["notes"] = b.notes;
  return j;
}

ReportBundle bundle_from_json(const json& j) {
  ReportBundle b;
  try {
    if (j.value("format", "") != "fingerlab.report/1") throw DataError("not a fingerlab report bundle");
    b.name = j.at("name").get<std::string>();
    b.setting = j.at("setting").get<std::string>();
    b.n_classes = j.at("n_classes").get<int>();
    b.class_names = j.at("class_names").get<std::vector<std::string>>();
    b.reports = j.at("reports").get<std::vector<AttributionReport>>();
    for (const auto& sj : j.at("series")) {
      Series s{sj.at("kind").get<std::string>(), sj.at("classifier").get<std::string>(), {}};
      for (const auto& p : sj.at("points")) {
        s.points.push_back({p.at("x").get<std::int64_t>(), p.at("tokens").get<std::int64_t>(),
                            p.at("mean").get<double>(), p.at("std").get<double>(),
                            p.at("p_value").get<double>(), p.at("n_test").get<std::int64_t>()});
      }
      b.series.push_back(std::move(s));
    }
    const auto& pj = j.at("parity");
    b.parity.perplexity = pj.at("perplexity").get<std::map<std::string, double>>();
    b.parity.band = pj.at("band").get<double>();
    b.parity.spread = pj.at("spread").get<double>();
    b.parity.ok = pj.at("ok").get<bool>();
    b.provenance = j.at("provenance");
    b.dataset = j.at("dataset");
    for (const auto& f : j.at("failures")) {
      b.failures.push_back({f.at("stage").get<std::string>(), f.at("message").get<std::string>()});
    }
    b.cache_hits = j.at("cache").at("hits").get<std::map<std::string, std::int64_t>>();
    b.cache_misses = j.at("cache").at("misses").get<std::map<std::string, std::int64_t>>();
    b.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("report bundle: ") + e.what());
  }
  return b;
}

std::string summary_text(const ReportBundle& b) {
  std::ostringstream out;
  out << "Experiment " << b.name << " (" << b.setting << "), " << b.n_classes << " models, chance "
      << pct(b.chance_rate()) << "\n";
  if (b.partial()) out << "PARTIAL: " << b.failures.size() << " stage(s) failed\n";
  out << "\n";
  for (const auto& r : b.reports) {
    const char* verdict = r.p_value < 0.01 ? "above chance (p < 0.01)"
                          : r.p_value < 0.05 ? "above chance (p < 0.05)"
                                             : "not distinguishable from chance";
    out << r.classifier << ": " << format_mean_std({r.mean, r.std}) << " % over " << r.split_seeds.size()
        << " split seeds, " << r.n_test << " test samples per seed; chance " << pct(r.chance_rate)
        << ", p = " << fmt("%.3g", r.p_value) << ", " << verdict << "\n";
    for (const auto& [cls, feats] : r.top_features) {
      out << "  top features for " << cls << ":";
      for (const auto& f : feats) out << " " << f.text;
      out << "\n";
    }
  }
  for (const auto& s : b.series) {
    out << "\n" << s.kind << " series, " << s.classifier << ":\n";
    for (const auto& p : s.points) {
      out << "  " << (s.kind == "checkpoint" ? "step " : "size ") << p.x;
      if (s.kind == "checkpoint") out << " (" << p.tokens << " tokens)";
      out << ": " << format_mean_std({p.mean, p.std}) << " %, p = " << fmt("%.3g", p.p_value) << "\n";
    }
  }
  if (!b.parity.perplexity.empty()) {
    out << "\nHeld-out perplexity:";
    for (const auto& [id, ppl] : b.parity.perplexity) out << " " << id << "=" << fmt("%.3f", ppl);
    out << "; spread " << pct(b.parity.spread) << " (band " << pct(b.parity.band) << ")"
        << (b.parity.ok ? "" : " FLAGGED") << "\n";
  }
  for (const auto& f : b.failures) out << "failed stage " << f.stage << ": " << f.message << "\n";
  if (!b.notes.empty()) {
    out << "\nNotes:\n";
    for (const auto& n : b.notes) out << "  " << n << "\n";
  }
  return out.str();
}

void emit_reports(const ReportBundle& b, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  write_file_atomic(out_dir / "report.json", bundle_to_json(b).dump(2));

  // One row per report, then one per series point.
  std::ostringstream csv;
  csv << "setting,classifier,row_kind,x,tokens,n_train,n_test,mean,std,chance,p_value\n";
  for (const auto& r : b.reports) {
    csv << csv_field(b.setting) << ',' << r.classifier << ",final,,," << r.n_train << ',' << r.n_test << ','
        << fmt("%.6f", r.mean) << ',' << fmt("%.6f", r.std) << ',' << fmt("%.6f", r.chance_rate) << ','
        << fmt("%.6g", r.p_value) << '\n';
  }
  for (const auto& s : b.series) {
    for (const auto& p : s.points) {
      csv << csv_field(b.setting) << ',' << s.classifier << ',' << s.kind << ',' << p.x << ','
          << (s.kind == "checkpoint" ? std::to_string(p.tokens) : "") << ','
          << (s.kind == "train_size" ? std::to_string(p.x * b.n_classes) : "") << ',' << p.n_test << ','
          << fmt("%.6f", p.mean) << ',' << fmt("%.6f", p.std) << ',' << fmt("%.6f", b.chance_rate()) << ','
          << fmt("%.6g", p.p_value) << '\n';
    }
  }
  write_file_atomic(out_dir / "summary.csv", csv.str());

  for (const auto& s : b.series) {
    std::ostringstream plot;
    plot << "x,tokens,y,err,p_value,n_test\n";
    for (const auto& p : s.points) {
      plot << p.x << ',' << p.tokens << ',' << fmt("%.6f", p.mean) << ',' << fmt("%.6f", p.std) << ','
           << fmt("%.6g", p.p_value) << ',' << p.n_test << '\n';
    }
    write_file_atomic(out_dir / ("series_" + s.kind + "_" + s.classifier + ".csv"), plot.str());
  }
  write_file_atomic(out_dir / "summary.txt", summary_text(b));
}

}  // namespace fingerlab
