#include "tlg/ablation.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "tlg/errors.hpp"

namespace tlg::ablation {

namespace {

std::string join(const std::vector<int>& v) {
  if (v.size() == backbone::kNumTaps) return "0-12";
  std::string s;
  for (int x : v) s += (s.empty() ? "" : " ") + std::to_string(x);
  return s;
}

std::vector<int> all_taps() { return backbone::LayerSelection::all_taps().support; }

}  // namespace

std::vector<std::string> preset_names() { return {"modules", "layers", "loss"}; }

std::vector<GridPoint> preset(const std::string& name, const Config& base) {
  std::vector<GridPoint> g;
  if (name == "modules") {
    struct M {
      const char* label;
      bool ha, ht, hc;
    };
    for (const M m : {M{"backbone+head", false, false, false}, M{"+HA", true, false, false},
                      M{"+HA+HT", true, true, false}, M{"+HA+HC", true, false, true}, M{"+HA+HT+HC", true, true, true}}) {
      Config c = base;
      c.modules = {m.ha, m.ht, m.hc};
      // without HA both branches read the same (support) taps
      if (!m.ha) c.layers.query = c.layers.support;
      g.push_back({"modules", m.label, c});
    }
  } else if (name == "layers") {
    const std::vector<std::pair<std::vector<int>, std::vector<int>>> rows = {
        {all_taps(), all_taps()}, {{0, 4, 10}, {3, 9, 12}}, {{3, 9, 12}, {0, 4, 10}}, {{3, 9, 12}, {2, 7, 11}}};
    for (const auto& [s, q] : rows) {
      Config c = base;
      c.layers.support = s;
      c.layers.query = q;
      g.push_back({"layers", join(s) + " / " + join(q), c});
    }
  } else if (name == "loss") {
    for (const auto& [a, b] : std::vector<std::pair<double, double>>{
             {1.0, 1.0}, {0.6, 1.0}, {1.0, 0.6}, {1.4, 1.0}, {1.0, 1.4}, {0.6, 1.4}, {1.4, 0.6}}) {
      Config c = base;
      c.loss.alpha = a;
      c.loss.beta = b;
      std::ostringstream label;
      label << "alpha=" << a << " beta=" << b;
      g.push_back({"loss", label.str(), c});
    }
  } else {
    throw ConfigError("unknown ablation preset '" + name + "' (modules, layers, loss)");
  }
  return g;
}

std::vector<Row> run(const std::vector<GridPoint>& grid, const data::Dataset& dataset, const Options& opts) {
  std::vector<Row> rows;
  for (const auto& point : grid) {
    Row row;
    row.point = point;
    try {
      validate(point.cfg);
      auto model = build_model(point.cfg, dataset.category_names);
      row.learnable_parameters = count_learnable_parameters(*model);
      if (opts.train) train::train(point.cfg, dataset, model);
      model->eval();
      const auto folds = point.cfg.eval.folds.empty() ? std::vector<int>{point.cfg.train.fold} : point.cfg.eval.folds;
      std::vector<train::EvalReport> per_fold;
      for (int f : folds)
        per_fold.push_back(train::evaluate(model, point.cfg, dataset, f, point.cfg.train.shots, point.cfg.eval.episodes,
                                           point.cfg.eval.seed));
      row.report = train::combine_reports(per_fold);
      if (opts.log)
        *opts.log << point.table << " | " << point.label << " | mIoU " << std::setprecision(4) << row.report->mean_miou
                  << " | params " << row.learnable_parameters << std::endl;
    } catch (const ConfigError& e) {
      row.skipped_reason = e.what();
    } catch (const ShapeError& e) {
      row.skipped_reason = e.what();
    }
    if (!row.skipped_reason.empty() && opts.log)
      *opts.log << point.table << " | " << point.label << " | skipped: " << row.skipped_reason << std::endl;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_csv(const std::vector<Row>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << "table,label,support_layers,query_layers,ha,ht,hc,alpha,beta,learnable_parameters,mean_miou,fold_miou,status\n"
      << std::setprecision(10);
  for (const auto& r : rows) {
    const auto& c = r.point.cfg;
    std::string folds;
    if (r.report)
      for (double v : r.report->fold_miou) {
        std::ostringstream s;
        s << std::setprecision(10) << v;
        folds += (folds.empty() ? "" : ";") + s.str();
      }
    std::string status = r.report ? "ok" : "skipped: " + r.skipped_reason;
    for (auto& ch : status)
      if (ch == ',' || ch == '\n') ch = ';';
    out << r.point.table << ",\"" << r.point.label << "\"," << join(c.layers.support) << "," << join(c.layers.query)
        << "," << c.modules.ha << "," << c.modules.ht << "," << c.modules.hc << "," << c.loss.alpha << "," << c.loss.beta
        << "," << r.learnable_parameters << ",";
    if (r.report) out << r.report->mean_miou;
    out << "," << folds << "," << status << "\n";
  }
}

}  // namespace tlg::ablation
