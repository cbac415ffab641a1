#include "combo/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <vector>

#include "combo/error.hpp"

namespace combo {

using nlohmann::json;

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 24, kTop = 40, kBottom = 56;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

class Canvas {
 public:
  Canvas(const std::string& title, const std::string& xlabel, const std::string& ylabel, double ymin, double ymax)
      : ymin_(ymin), ymax_(ymax > ymin ? ymax : ymin + 1) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
        << "</text>\n"
        << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">" << escape(xlabel)
        << "</text>\n"
        << "<text x=\"16\" y=\"" << kHeight / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << kHeight / 2 << ")\">" << escape(ylabel) << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
      const double v = ymin_ + (ymax_ - ymin_) * i / 4.0;
      const double y = py(v);
      os_ << "<line x1=\"" << kLeft << "\" y1=\"" << y << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n"
          << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
    }
    os_ << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
        << kHeight - kBottom << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom
        << "\" stroke=\"black\"/>\n";
  }

  double py(double v) const { return kHeight - kBottom - (v - ymin_) / (ymax_ - ymin_) * (kHeight - kTop - kBottom); }
  static double slot(std::size_t i, std::size_t n) {
    return kLeft + (static_cast<double>(i) + 0.5) * (kWidth - kLeft - kRight) / static_cast<double>(n);
  }

  void xtick(double x, const std::string& label) {
    os_ << "<text x=\"" << x << "\" y=\"" << kHeight - kBottom + 16 << "\" text-anchor=\"middle\">" << escape(label)
        << "</text>\n";
  }

  void polyline(const std::vector<double>& ys) {
    os_ << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) os_ << slot(i, ys.size()) << ',' << py(ys[i]) << ' ';
    os_ << "\"/>\n";
    for (std::size_t i = 0; i < ys.size(); ++i) {
      os_ << "<circle cx=\"" << slot(i, ys.size()) << "\" cy=\"" << py(ys[i]) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
    }
  }

  void bar(std::size_t i, std::size_t n, double v) {
    const double w = 0.6 * (kWidth - kLeft - kRight) / static_cast<double>(n);
    const double x = slot(i, n) - w / 2;
    os_ << "<rect x=\"" << x << "\" y=\"" << py(v) << "\" width=\"" << w << "\" height=\"" << py(ymin_) - py(v)
        << "\" fill=\"#ff7f0e\"/>\n"
        << "<text x=\"" << slot(i, n) << "\" y=\"" << py(v) - 4 << "\" text-anchor=\"middle\">" << num(v)
        << "</text>\n";
  }

  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  double ymin_, ymax_;
  std::ostringstream os_;
};

template <class F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": " + e.what());
  }
}

std::size_t tick_stride(std::size_t n) { return std::max<std::size_t>(1, n / 12); }

}  // namespace

std::string svg_layer_curve(const json& sweep) {
  return guarded("layer sweep report", [&] {
    const auto& curve = sweep.at("curve");
    if (curve.empty()) throw DataError("layer sweep report has no rows");
    std::vector<double> acc;
    Canvas c("Linear probe accuracy by layer: " + sweep.at("backbone").get<std::string>(), "layer",
             "validation accuracy", 0, 1);
    for (std::size_t i = 0; i < curve.size(); ++i) {
      acc.push_back(curve[i].at("val_acc").get<double>());
      c.xtick(Canvas::slot(i, curve.size()), std::to_string(curve[i].at("layer").get<int>()));
    }
    c.polyline(acc);
    return c.finish();
  });
}

std::string svg_score_bars(const json& importance) {
  return guarded("importance report", [&] {
    const auto ids = importance.at("backbones").get<std::vector<std::string>>();
    const auto scores = importance.at("mean_scores").get<std::vector<double>>();
    if (ids.empty() || ids.size() != scores.size()) throw DataError("importance report has mismatched scores");
    const double top = *std::max_element(scores.begin(), scores.end());
    Canvas c("Backbone importance scores (lambda " + num(importance.at("lambda").get<double>()) + ")", "backbone",
             "mean group norm", 0, top > 0 ? top * 1.15 : 1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      c.bar(i, ids.size(), scores[i]);
      c.xtick(Canvas::slot(i, ids.size()), ids[i]);
    }
    return c.finish();
  });
}

std::string svg_train_curve(const json& report) {
  return guarded("train report", [&] {
    const auto& epochs = report.at("epochs");
    if (epochs.empty()) throw DataError("train report has no epochs");
    Canvas c("Validation accuracy during training: " + report.at("dataset").get<std::string>(), "epoch",
             "validation accuracy", 0, 1);
    std::vector<double> acc;
    const std::size_t stride = tick_stride(epochs.size());
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      acc.push_back(epochs[i].at("val_accuracy").get<double>());
      if (i % stride == 0) c.xtick(Canvas::slot(i, epochs.size()), std::to_string(epochs[i].at("epoch").get<int>()));
    }
    c.polyline(acc);
    return c.finish();
  });
}

std::string render_svg(const json& report) {
  const std::string kind = report.is_object() ? report.value("kind", std::string()) : std::string();
  if (kind == "layer_sweep") return svg_layer_curve(report);
  if (kind == "importance_report") return svg_score_bars(report);
  if (kind == "train_report") return svg_train_curve(report);
  throw DataError("cannot plot a report of kind \"" + kind + "\"");
}

}  // namespace combo
